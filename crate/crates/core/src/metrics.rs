//! Image and distribution metrics used by evaluation.

use alloc::vec::Vec;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak-to-peak range of images stored in `[−1, 1]`.
pub const IMAGE_PEAK: f64 = 2.0;

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "image sizes differ");
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| { let d = x as f64 - y as f64; d * d }).sum::<f64>() / a.len() as f64
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * libm::log10(peak * peak / m)).min(PSNR_CAP_DB)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - half;
            let dx = c as f64 - half;
            w.push(libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

/// Structural similarity of two `H×W×C` images in `[−1, 1]`.
///
/// Images are remapped to `[0, 1]`; statistics use a 7×7 Gaussian window
/// (σ = 1.5) over valid positions only, with `K1 = 0.01`, `K2 = 0.03`. The
/// result is the mean over positions and channels.
pub fn ssim(a: &[f32], b: &[f32], height: usize, width: usize, channels: usize) -> f64 {
    assert_eq!(a.len(), height * width * channels);
    assert_eq!(b.len(), a.len());
    let win = SSIM_WINDOW.min(height).min(width);
    let weights = gaussian_window(win, SSIM_SIGMA);
    let c1 = 0.01 * 0.01;
    let c2 = 0.03 * 0.03;
    let px = |img: &[f32], r: usize, c: usize, ch: usize| (img[(r * width + c) * channels + ch] as f64 + 1.0) / 2.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for r0 in 0..=height - win {
            for c0 in 0..=width - win {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wr in 0..win {
                    for wc in 0..win {
                        let w = weights[wr * win + wc];
                        let x = px(a, r0 + wr, c0 + wc, ch);
                        let y = px(b, r0 + wr, c0 + wc, ch);
                        ma += w * x;
                        mb += w * y;
                        saa += w * x * x;
                        sbb += w * y * y;
                        sab += w * x * y;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// 1-Wasserstein distance between two empirical distributions,
/// `∫|F_a(x) − F_b(x)| dx`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty sample");
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = sa[0].min(sb[0]);
    let mut dist = 0.0;
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < sa.len() && sa[i] <= next {
            i += 1;
        }
        while j < sb.len() && sb[j] <= next {
            j += 1;
        }
        prev = next;
    }
    dist
}

/// `n` evenly spaced quantiles `(k + ½)/n` of a distribution.
pub fn quantile_grid(n: usize, quantile: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..n).map(|k| quantile((k as f64 + 0.5) / n as f64)).collect()
}

/// Fraction of errors at or below `threshold`.
pub fn fraction_within(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psnr_examples() {
        let a = [0.5f32; 12];
        assert_eq!(psnr(&a, &a, IMAGE_PEAK), PSNR_CAP_DB);
        let b: alloc::vec::Vec<f32> = a.iter().map(|v| v + 0.2).collect();
        assert_relative_eq!(psnr(&a, &b, IMAGE_PEAK), 20.0, epsilon = 1e-5);
    }

    #[test]
    fn ssim_identical_is_one() {
        let img: alloc::vec::Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        assert_relative_eq!(ssim(&img, &img, 16, 16, 3), 1.0, epsilon = 1e-12);
        let noisy: alloc::vec::Vec<f32> = img.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.3 } else { -0.3 }).collect();
        let s = ssim(&img, &noisy, 16, 16, 3);
        assert!(s < 0.9 && s > -1.0);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.0], &[0.0]), 0.0);
        assert_relative_eq!(wasserstein_1d(&[0.0], &[2.0]), 2.0);
        assert_relative_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5]), 0.5);
        // shift of a distribution moves it by exactly the shift
        let a = [0.1, 0.4, 0.9, 1.3];
        let b: alloc::vec::Vec<f64> = a.iter().map(|v| v + 0.7).collect();
        assert_relative_eq!(wasserstein_1d(&a, &b), 0.7, epsilon = 1e-12);
        assert_relative_eq!(wasserstein_1d(&a, &b), wasserstein_1d(&b, &a), epsilon = 1e-12);
    }

    #[test]
    fn uniform_quantiles() {
        let q = quantile_grid(4, |u| u * 8.0);
        assert_eq!(q, alloc::vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn summary_stats() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(fraction_within(&[1.0, 10.0, 20.0, 40.0], 15.0), 0.5);
        assert_eq!(variance(&[1.0, 3.0]), 1.0);
    }
}
