//! Plain-loop reference implementations shared by integration targets.
#![allow(dead_code)]

use p2d_core::matcher::SemanticProfile;
use p2d_core::translation::{Conv2d, Discriminator, Generator, TranslatorPair};

/// A batch of images as `[n][c][y][x]`.
pub type Images = Vec<Vec<Vec<Vec<f64>>>>;

pub fn images_from_flat(n: usize, h: usize, w: usize, data: &[f64]) -> Images {
    (0..n)
        .map(|i| {
            (0..3)
                .map(|c| (0..h).map(|y| (0..w).map(|x| data[((i * 3 + c) * h + y) * w + x]).collect()).collect())
                .collect()
        })
        .collect()
}

fn conv(layer: &Conv2d, input: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let h = input[0].len() as isize;
    let w = input[0][0].len() as isize;
    let k = layer.kernel as isize;
    let pad = layer.padding as isize;
    let s = layer.stride as isize;
    let out_h = (h + 2 * pad - k) / s + 1;
    let out_w = (w + 2 * pad - k) / s + 1;
    let mut out = vec![vec![vec![0.0; out_w as usize]; out_h as usize]; layer.out_channels];
    for (o, plane) in out.iter_mut().enumerate() {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = layer.bias[o];
                for i in 0..layer.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = oy * s + ky - pad;
                            let x = ox * s + kx - pad;
                            if y < 0 || x < 0 || y >= h || x >= w {
                                continue;
                            }
                            let wi = ((o * layer.in_channels + i) * layer.kernel + ky as usize) * layer.kernel
                                + kx as usize;
                            acc += layer.weight[wi] * input[i][y as usize][x as usize];
                        }
                    }
                }
                plane[oy as usize][ox as usize] = acc;
            }
        }
    }
    out
}

fn leaky(maps: &mut [Vec<Vec<f64>>], slope: f64) {
    for v in maps.iter_mut().flatten().flatten() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

fn stack(layers: &[Conv2d], slope: f64, image: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let mut h = image.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        h = conv(layer, &h);
        if i + 1 < layers.len() {
            leaky(&mut h, slope);
        }
    }
    h
}

pub fn generate(g: &Generator, batch: &Images) -> Images {
    batch
        .iter()
        .map(|img| {
            let residual = stack(&g.layers, g.slope, img);
            img.iter()
                .zip(&residual)
                .map(|(xc, rc)| {
                    xc.iter()
                        .zip(rc)
                        .map(|(xr, rr)| xr.iter().zip(rr).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn logits(d: &Discriminator, batch: &Images) -> Vec<f64> {
    batch
        .iter()
        .flat_map(|img| stack(&d.layers, d.slope, img).into_iter().flatten().flatten())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn adversarial(d: &Discriminator, real: &Images, fake: &Images) -> f64 {
    let r = logits(d, real);
    let f = logits(d, fake);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    mean(r.iter().map(|&x| sigmoid(x).ln()).collect()) + mean(f.iter().map(|&x| (1.0 - sigmoid(x)).ln()).collect())
}

fn mean_abs(a: &Images, b: &Images) -> f64 {
    let diffs: Vec<f64> = a
        .iter()
        .flatten()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .collect();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

pub fn cycle(pair: &TranslatorPair, ori: &Images, photo: &Images) -> f64 {
    let photo_rec = generate(&pair.gen_ori_to_photo, &generate(&pair.gen_photo_to_ori, photo));
    let ori_rec = generate(&pair.gen_photo_to_ori, &generate(&pair.gen_ori_to_photo, ori));
    mean_abs(&photo_rec, photo) + mean_abs(&ori_rec, ori)
}

/// `(adv_ori, adv_photo, cyc, total)`.
pub fn objective(pair: &TranslatorPair, ori: &Images, photo: &Images, lambda_adv: f64, lambda_cyc: f64) -> [f64; 4] {
    let adv_ori = adversarial(&pair.disc_ori, ori, &generate(&pair.gen_photo_to_ori, photo));
    let adv_photo = adversarial(&pair.disc_photo, photo, &generate(&pair.gen_ori_to_photo, ori));
    let cyc = cycle(pair, ori, photo);
    [adv_ori, adv_photo, cyc, adv_ori + lambda_adv * adv_photo + lambda_cyc * cyc]
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y);
    let na: f64 = a.iter().fold(0.0, |s, x| s + x * x);
    let nb: f64 = b.iter().fold(0.0, |s, x| s + x * x);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Scores every photo, sorts by score descending then id ascending, keeps `k`.
pub fn brute_force_top_k(painting: &SemanticProfile, photos: &[SemanticProfile], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = photos
        .iter()
        .map(|p| (p.image_id.clone(), plain_cosine(&painting.weights, &p.weights)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `params[i]`.
pub fn central_difference(params: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let up = f(&p);
    p[i] = params[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}
