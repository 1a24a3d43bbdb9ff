//! SSIM with an analytic input gradient, and the 5-level MS-SSIM.
//!
//! Statistics use an 11x11 Gaussian window (sigma 1.5) over valid window
//! positions, with the standard stabilizers `C1 = 0.01^2`, `C2 = 0.03^2` for
//! unit peak. The window shrinks to the short image side when 11 does not
//! fit. Channels are scored independently and averaged.

use crate::buffer::{BufferError, ImageBuffer};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

fn gaussian_window(size: usize) -> Vec<f64> {
    let center = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable valid convolution of an `h x w` plane with `win (x) win`.
fn conv_valid(plane: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (o, &c) in win.iter().enumerate() {
                s += c * plane[y * w + x + o];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (o, &c) in win.iter().enumerate() {
                s += c * tmp[(y + o) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`conv_valid`]: scatter a valid-position map back to pixels.
fn conv_valid_adjoint(map: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (o, &c) in win.iter().enumerate() {
                tmp[(y + o) * ow + x] += c * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (o, &c) in win.iter().enumerate() {
                out[y * w + x + o] += c * v;
            }
        }
    }
    out
}

fn channel_plane(img: &ImageBuffer, ch: usize) -> Vec<f64> {
    img.pixels[ch..].iter().step_by(3).copied().collect()
}

struct WindowStats {
    ow: usize,
    oh: usize,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov_xy: Vec<f64>,
}

fn window_stats(x: &[f64], y: &[f64], w: usize, h: usize, win: &[f64]) -> WindowStats {
    let mu_x = conv_valid(x, w, h, win);
    let mu_y = conv_valid(y, w, h, win);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mut var_x = conv_valid(&xx, w, h, win);
    let mut var_y = conv_valid(&yy, w, h, win);
    let mut cov_xy = conv_valid(&xy, w, h, win);
    for i in 0..mu_x.len() {
        var_x[i] -= mu_x[i] * mu_x[i];
        var_y[i] -= mu_y[i] * mu_y[i];
        cov_xy[i] -= mu_x[i] * mu_y[i];
    }
    let k = win.len();
    WindowStats {
        ow: w - k + 1,
        oh: h - k + 1,
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov_xy,
    }
}

/// Mean SSIM over channels and valid window positions; 1.0 iff identical.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, BufferError> {
    a.check_same_shape(b)?;
    let win = gaussian_window(WINDOW.min(a.width).min(a.height));
    let mut total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let st = window_stats(&x, &y, a.width, a.height, &win);
        let n = st.ow * st.oh;
        let mut acc = 0.0;
        for p in 0..n {
            let a1 = 2.0 * st.mu_x[p] * st.mu_y[p] + C1;
            let a2 = 2.0 * st.cov_xy[p] + C2;
            let b1 = st.mu_x[p] * st.mu_x[p] + st.mu_y[p] * st.mu_y[p] + C1;
            let b2 = st.var_x[p] + st.var_y[p] + C2;
            acc += (a1 * a2) / (b1 * b2);
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// SSIM plus `d(SSIM)/d(pred)` for every pixel of the first argument.
///
/// With per-window terms `A1 = 2 mu_x mu_y + C1`, `A2 = 2 cov + C2`,
/// `B1 = mu_x^2 + mu_y^2 + C1`, `B2 = var_x + var_y + C2` and `S = A1 A2 /
/// (B1 B2)`, the partial w.r.t. pred pixel `x_i` inside window `p` is
///
/// ```text
/// dS_p/dx_i = 2 w_{i-p} [ alpha_p + beta_p y_i + gamma_p x_i ]
/// alpha = mu_y (A2 - A1) / (B1 B2) - S mu_x / B1 + S mu_x / B2
/// beta  = A1 / (B1 B2)
/// gamma = -S / B2
/// ```
///
/// so the full gradient is a window-scatter of three coefficient maps.
pub fn ssim_with_grad(
    pred: &ImageBuffer,
    truth: &ImageBuffer,
) -> Result<(f64, ImageBuffer), BufferError> {
    pred.check_same_shape(truth)?;
    let (w, h) = (pred.width, pred.height);
    let win = gaussian_window(WINDOW.min(w).min(h));
    let mut grad = ImageBuffer::zeros(w, h)?;
    let mut total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(pred, ch);
        let y = channel_plane(truth, ch);
        let st = window_stats(&x, &y, w, h, &win);
        let n = st.ow * st.oh;
        let mut alpha = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        let mut acc = 0.0;
        for p in 0..n {
            let a1 = 2.0 * st.mu_x[p] * st.mu_y[p] + C1;
            let a2 = 2.0 * st.cov_xy[p] + C2;
            let b1 = st.mu_x[p] * st.mu_x[p] + st.mu_y[p] * st.mu_y[p] + C1;
            let b2 = st.var_x[p] + st.var_y[p] + C2;
            let s = (a1 * a2) / (b1 * b2);
            acc += s;
            alpha[p] = st.mu_y[p] * (a2 - a1) / (b1 * b2) - s * st.mu_x[p] / b1
                + s * st.mu_x[p] / b2;
            beta[p] = a1 / (b1 * b2);
            gamma[p] = -s / b2;
        }
        total += acc / n as f64;
        let sa = conv_valid_adjoint(&alpha, w, h, &win);
        let sb = conv_valid_adjoint(&beta, w, h, &win);
        let sg = conv_valid_adjoint(&gamma, w, h, &win);
        // average over window count and the 3 channels
        let norm = 2.0 / (n as f64 * 3.0);
        for i in 0..w * h {
            grad.pixels[i * 3 + ch] = norm * (sa[i] + sb[i] * y[i] + sg[i] * x[i]);
        }
    }
    Ok((total / 3.0, grad))
}

/// 2x2 box downsample with floor dims (odd trailing row/column dropped).
fn half(img: &ImageBuffer) -> ImageBuffer {
    let ow = img.width / 2;
    let oh = img.height / 2;
    let mut out = ImageBuffer::zeros(ow, oh).expect("halved dims stay nonzero");
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = [0.0; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = img.get(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set(x, y, [acc[0] / 4.0, acc[1] / 4.0, acc[2] / 4.0]);
        }
    }
    out
}

/// Standard 5-scale MS-SSIM weights.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Mean contrast-structure term and mean full SSIM for one level.
fn level_scores(a: &ImageBuffer, b: &ImageBuffer) -> (f64, f64) {
    let win = gaussian_window(WINDOW.min(a.width).min(a.height));
    let mut cs_total = 0.0;
    let mut ssim_total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let st = window_stats(&x, &y, a.width, a.height, &win);
        let n = st.ow * st.oh;
        let mut cs_acc = 0.0;
        let mut s_acc = 0.0;
        for p in 0..n {
            let a1 = 2.0 * st.mu_x[p] * st.mu_y[p] + C1;
            let a2 = 2.0 * st.cov_xy[p] + C2;
            let b1 = st.mu_x[p] * st.mu_x[p] + st.mu_y[p] * st.mu_y[p] + C1;
            let b2 = st.var_x[p] + st.var_y[p] + C2;
            cs_acc += a2 / b2;
            s_acc += (a1 * a2) / (b1 * b2);
        }
        cs_total += cs_acc / n as f64;
        ssim_total += s_acc / n as f64;
    }
    (cs_total / 3.0, ssim_total / 3.0)
}

/// Multi-scale SSIM: contrast-structure at every level, luminance folded in
/// at the coarsest, combined as a weighted geometric mean. Uses the standard
/// 5 levels when the short side allows (>= 176 px); otherwise as many levels
/// as fit an 11-px window, with the weight prefix renormalized.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, BufferError> {
    a.check_same_shape(b)?;
    let short = a.width.min(a.height);
    let mut levels = 1;
    while levels < 5 && short / (1 << levels) >= WINDOW {
        levels += 1;
    }
    let wsum: f64 = MS_WEIGHTS[..levels].iter().sum();
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut result = 1.0f64;
    for lvl in 0..levels {
        let (cs, s) = level_scores(&cur_a, &cur_b);
        let weight = MS_WEIGHTS[lvl] / wsum;
        let term = if lvl + 1 == levels { s } else { cs };
        // negative terms (possible on adversarial inputs) zero the product
        result *= term.max(0.0).powf(weight);
        if lvl + 1 != levels {
            cur_a = half(&cur_a);
            cur_b = half(&cur_b);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::zeros(w, h).unwrap();
        for v in img.pixels.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = StdRng::seed_from_u64(1);
        let img = random_image(&mut rng, 24, 24);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ms_ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn inverted_content_scores_low() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = random_image(&mut rng, 200, 200);
        let mut b = a.clone();
        for v in b.pixels.iter_mut() {
            *v = 1.0 - *v;
        }
        assert!(ms_ssim(&a, &b).unwrap() < 0.5);
        assert!(ssim(&a, &b).unwrap() < 0.5);
    }

    #[test]
    fn symmetric() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        let d = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
        assert!(d < 1e-12);
        let d = (ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs();
        assert!(d < 1e-12);
    }

    #[test]
    fn constant_images_luminance_only() {
        // zero variance: S reduces to the luminance term
        let a = ImageBuffer::constant(16, 16, [0.3; 3]).unwrap();
        let b = ImageBuffer::constant(16, 16, [0.5; 3]).unwrap();
        let expect = (2.0 * 0.3 * 0.5 + C1) / (0.3f64.powi(2) + 0.5f64.powi(2) + C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..5 {
            let pred = random_image(&mut rng, 8, 8);
            let truth = random_image(&mut rng, 8, 8);
            let (_, grad) = ssim_with_grad(&pred, &truth).unwrap();
            for _ in 0..30 {
                let i = rng.gen_range(0..pred.pixels.len());
                let h = 1e-5;
                let mut plus = pred.clone();
                plus.pixels[i] += h;
                let mut minus = pred.clone();
                minus.pixels[i] -= h;
                let num = (ssim(&plus, &truth).unwrap() - ssim(&minus, &truth).unwrap())
                    / (2.0 * h);
                let ana = grad.pixels[i];
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < 1e-3,
                    "pixel {i}: num={num} ana={ana}"
                );
            }
        }
    }

    #[test]
    fn ms_ssim_matches_reference_implementation() {
        // independent oracle: direct per-window loops, no separable passes
        fn ref_stats(
            a: &ImageBuffer,
            b: &ImageBuffer,
            ch: usize,
            win: &[f64],
        ) -> (f64, f64) {
            let k = win.len();
            let (w, h) = (a.width, a.height);
            let mut cs_sum = 0.0;
            let mut s_sum = 0.0;
            let mut count = 0.0;
            for wy in 0..=(h - k) {
                for wx in 0..=(w - k) {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut sxx = 0.0;
                    let mut syy = 0.0;
                    let mut sxy = 0.0;
                    for oy in 0..k {
                        for ox in 0..k {
                            let wgt = win[oy] * win[ox];
                            let xv = a.get(wx + ox, wy + oy)[ch];
                            let yv = b.get(wx + ox, wy + oy)[ch];
                            mx += wgt * xv;
                            my += wgt * yv;
                            sxx += wgt * xv * xv;
                            syy += wgt * yv * yv;
                            sxy += wgt * xv * yv;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    let a1 = 2.0 * mx * my + C1;
                    let a2 = 2.0 * cxy + C2;
                    let b1 = mx * mx + my * my + C1;
                    let b2 = vx + vy + C2;
                    cs_sum += a2 / b2;
                    s_sum += (a1 * a2) / (b1 * b2);
                    count += 1.0;
                }
            }
            (cs_sum / count, s_sum / count)
        }

        fn ref_ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
            let short = a.width.min(a.height);
            let mut levels = 1;
            while levels < 5 && short / (1 << levels) >= WINDOW {
                levels += 1;
            }
            let wsum: f64 = MS_WEIGHTS[..levels].iter().sum();
            let mut ca = a.clone();
            let mut cb = b.clone();
            let mut result = 1.0;
            for lvl in 0..levels {
                let win = gaussian_window(WINDOW.min(ca.width).min(ca.height));
                let mut cs = 0.0;
                let mut s = 0.0;
                for ch in 0..3 {
                    let (c, sv) = ref_stats(&ca, &cb, ch, &win);
                    cs += c / 3.0;
                    s += sv / 3.0;
                }
                let term = if lvl + 1 == levels { s } else { cs };
                result *= term.max(0.0).powf(MS_WEIGHTS[lvl] / wsum);
                if lvl + 1 != levels {
                    ca = half(&ca);
                    cb = half(&cb);
                }
            }
            result
        }

        let mut rng = StdRng::seed_from_u64(5);
        for trial in 0..5 {
            // mix of sizes, including one below the 5-level threshold
            let (w, h) = [(180, 180), (64, 48), (200, 176), (90, 90), (33, 47)][trial];
            let a = random_image(&mut rng, w, h);
            // correlated distortion rather than independent noise
            let mut b = a.clone();
            for (i, v) in b.pixels.iter_mut().enumerate() {
                *v = (*v + 0.1 * ((i % 13) as f64 / 13.0 - 0.5)).clamp(0.0, 1.0);
            }
            let got = ms_ssim(&a, &b).unwrap();
            let want = ref_ms_ssim(&a, &b);
            assert!((got - want).abs() < 1e-3, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ImageBuffer::zeros(8, 8).unwrap();
        let b = ImageBuffer::zeros(8, 9).unwrap();
        assert!(ssim(&a, &b).is_err());
        assert!(ms_ssim(&a, &b).is_err());
        assert!(ssim_with_grad(&a, &b).is_err());
    }
}
