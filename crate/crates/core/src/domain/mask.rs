use serde::{Deserialize, Serialize};

use super::DomainError;

/// Binary mask as row-major run lengths, alternating off/on and starting
/// with an off run (which may be zero).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct MaskRle {
    pub h: u32,
    pub w: u32,
    pub counts: Vec<u32>,
}

impl MaskRle {
    /// Encodes a row-major bitmap. Panics if `bits.len() != width * height`.
    pub fn encode(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(
            bits.len(),
            width as usize * height as usize,
            "bitmap length does not match dimensions"
        );
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        Self {
            h: height,
            w: width,
            counts,
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::encode(width, height, &bits)
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`, clipped to the frame.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.pixel_count());
        let mut on = false;
        for &c in &self.counts {
            bits.extend(std::iter::repeat_n(on, c as usize));
            on = !on;
        }
        bits
    }

    pub fn pixel_count(&self) -> usize {
        self.w as usize * self.h as usize
    }

    /// Number of on pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = self.w as u64 * self.h as u64;
        if total != expected {
            return Err(DomainError::violation(
                "counts",
                format!("run lengths sum to {total}, expected {expected}"),
            ));
        }
        Ok(())
    }

    /// Row-major indices of the on pixels.
    pub fn on_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        let mut offset = 0usize;
        self.counts.iter().enumerate().flat_map(move |(i, &c)| {
            let start = offset;
            offset += c as usize;
            let range = start..offset;
            (i % 2 == 1).then_some(range).into_iter().flatten()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leading_on_pixel_emits_zero_off_run() {
        let m = MaskRle::encode(3, 1, &[true, true, false]);
        assert_eq!(m.counts, vec![0, 2, 1]);
        assert_eq!(m.area(), 2);
        m.validate().unwrap();
    }

    #[test]
    fn empty_and_full() {
        let m = MaskRle::encode(2, 2, &[false; 4]);
        assert_eq!(m.counts, vec![4]);
        assert_eq!(m.area(), 0);
        let m = MaskRle::encode(2, 2, &[true; 4]);
        assert_eq!(m.counts, vec![0, 4]);
        let z = MaskRle::encode(0, 0, &[]);
        assert_eq!(z.counts, vec![0]);
        z.validate().unwrap();
    }

    #[test]
    fn bad_sum_rejected() {
        let m = MaskRle {
            h: 2,
            w: 2,
            counts: vec![1, 2],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn serde_shape() {
        let m = MaskRle::rect(2, 1, 1, 0, 2, 1);
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"h":1,"w":2,"counts":[1,1]}"#
        );
    }

    proptest! {
        #[test]
        fn decode_encode_identity(
            (w, h, bits) in (1u32..=512, 1u32..=512).prop_flat_map(|(w, h)| {
                let n = (w * h) as usize;
                (Just(w), Just(h), proptest::collection::vec(any::<bool>(), n))
            })
        ) {
            let m = MaskRle::encode(w, h, &bits);
            prop_assert!(m.validate().is_ok());
            prop_assert_eq!(m.decode(), bits.clone());
            let on: Vec<usize> = m.on_pixels().collect();
            let expected: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
            prop_assert_eq!(on, expected);
        }

        #[test]
        fn sparse_masks_round_trip(
            (w, h, points) in (1u32..=512, 1u32..=512).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec((0..w, 0..h), 0..64))
            })
        ) {
            let mut bits = vec![false; (w * h) as usize];
            for (x, y) in points {
                bits[(y * w + x) as usize] = true;
            }
            let m = MaskRle::encode(w, h, &bits);
            prop_assert_eq!(m.decode(), bits);
        }
    }
}
