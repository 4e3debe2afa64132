use rand::Rng;

use crate::error::{Error, Result};

/// Bilinear resample of one `src × src` plane to `dst × dst`, with the corner
/// pixels aligned.
pub(crate) fn resize_plane(plane: &[f32], src: usize, dst: usize) -> Vec<f32> {
    let coord = |i: usize| -> (usize, usize, f32) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (s.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(dst * dst);
    for y in 0..dst {
        let (y0, y1, ty) = coord(y);
        for x in 0..dst {
            let (x0, x1, tx) = coord(x);
            let a = plane[y0 * src + x0];
            let b = plane[y0 * src + x1];
            let c = plane[y1 * src + x0];
            let d = plane[y1 * src + x1];
            let top = a + tx * (b - a);
            let bot = c + tx * (d - c);
            out.push(top + ty * (bot - top));
        }
    }
    out
}

/// Square crop covering a uniform area fraction in `scale`, at a uniform
/// position, resized back to `size × size`. `image` is CHW.
pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &[f32],
    channels: usize,
    size: usize,
    scale: (f64, f64),
    rng: &mut R,
) -> Result<Vec<f32>> {
    let (lo, hi) = scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Range(format!("crop scale ({lo}, {hi}) outside 0 < lo <= hi <= 1")));
    }
    if image.len() != channels * size * size {
        return Err(Error::dim("random_resized_crop", &[image.len()], &[channels, size, size]));
    }
    let area = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let side = ((size as f64 * area.sqrt()).round() as usize).clamp(1, size);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    let mut out = Vec::with_capacity(image.len());
    let mut crop = vec![0.0f32; side * side];
    for ch in 0..channels {
        let plane = &image[ch * size * size..(ch + 1) * size * size];
        for y in 0..side {
            let row = (y0 + y) * size + x0;
            crop[y * side..(y + 1) * side].copy_from_slice(&plane[row..row + side]);
        }
        out.extend(resize_plane(&crop, side, size));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_is_identity() {
        let img: Vec<f32> = (0..3 * 8 * 8).map(|i| i as f32 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_resized_crop(&img, 3, 8, (1.0, 1.0), &mut rng).unwrap(), img);
    }

    #[test]
    fn extent_preserved_and_constants_stay_constant() {
        let img = vec![0.25f32; 3 * 16 * 16];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = random_resized_crop(&img, 3, 16, (0.9, 1.0), &mut rng).unwrap();
            assert_eq!(out.len(), img.len());
            assert!(out.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let img: Vec<f32> = (0..16 * 16).map(|i| (i as f32).sin()).collect();
        let a = random_resized_crop(&img, 1, 16, (0.5, 1.0), &mut ChaCha8Rng::seed_from_u64(4));
        let b = random_resized_crop(&img, 1, 16, (0.5, 1.0), &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn bad_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_resized_crop(&[0.0; 4], 1, 2, (0.0, 1.0), &mut rng).is_err());
        assert!(random_resized_crop(&[0.0; 4], 1, 2, (0.9, 0.8), &mut rng).is_err());
    }
}
