//! End-to-end wiring check: the taped episode forward pass is replayed by a
//! straight-line script that only uses raw kernels and explicit loops, at
//! f64 on identical parameter values. Agreement within 1e-6 on the total
//! loss pins the composition (boxes -> purpose -> transfer -> shared bases
//! -> decoder -> objective), not just the individual operations.

use afford_core::episodes::generate_synthetic;
use afford_core::model::{Model, ModelConfig};
use afford_core::purpose::{BBox, SupportSample};
use afford_core::tensor::{kernels, Tape, Tensor};
use std::collections::HashMap;

type P = HashMap<String, Tensor<f64>>;

fn get<'a>(p: &'a P, name: &str) -> &'a Tensor<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing param {name}"))
}

fn relu(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
}

fn leaky(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = 0.9 * x.max(0.0) + 0.1 * *x;
    }
}

fn softmax_1d(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

struct Pyramid {
    levels: Vec<(Vec<f64>, usize, usize, usize)>, // data, c, h, w
}

fn encode(p: &P, channels: &[usize; 5], img: &Tensor<f64>) -> Pyramid {
    let mut data = img.data().to_vec();
    let (mut cin, mut h, mut w) = (3usize, img.shape()[1], img.shape()[2]);
    let mut levels = Vec::new();
    for (m, &cout) in channels.iter().enumerate() {
        let k = get(p, &format!("encoder.stage{}.kernel", m + 1));
        let b = get(p, &format!("encoder.stage{}.bias", m + 1));
        let mut out = kernels::conv2d(&data, k.data(), b.data(), cin, h, w, cout, 3, 2);
        relu(&mut out);
        h /= 2;
        w /= 2;
        cin = cout;
        levels.push((out.clone(), cout, h, w));
        data = out;
    }
    Pyramid { levels }
}

fn gmp(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| x[ch * n..(ch + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn guided(f: &[f64], x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..n)
        .map(|j| (0..c).map(|ch| f[ch] * x[ch * n + j]).sum())
        .collect();
    let alpha = softmax_1d(&scores);
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for j in 0..n {
            out[ch * n + j] = alpha[j] * x[ch * n + j];
        }
    }
    out
}

fn crop_box(x: &[f64], c: usize, gh: usize, gw: usize, bb: &BBox, stride: usize) -> (Vec<f64>, usize, usize) {
    let gy0 = (bb.y0 / stride).min(gh - 1);
    let gy1 = bb.y1.div_ceil(stride).clamp(gy0 + 1, gh);
    let gx0 = (bb.x0 / stride).min(gw - 1);
    let gx1 = bb.x1.div_ceil(stride).clamp(gx0 + 1, gw);
    let (hh, ww) = (gy1 - gy0, gx1 - gx0);
    let mut out = vec![0.0; c * hh * ww];
    for ch in 0..c {
        for y in 0..hh {
            for xx in 0..ww {
                out[(ch * hh + y) * ww + xx] = x[(ch * gh + gy0 + y) * gw + gx0 + xx];
            }
        }
    }
    (out, hh, ww)
}

fn purpose_vector(p: &P, sup: &Pyramid, sample: &SupportSample<f64>) -> Vec<f64> {
    let (x5, c, gh, gw) = {
        let l = &sup.levels[4];
        (&l.0, l.1, l.2, l.3)
    };
    let n = gh * gw;
    let stride = sample.image.shape()[1] / gh;
    let (xh, hh, hw) = crop_box(x5, c, gh, gw, &sample.human_box, stride);
    let (xo, oh, ow) = crop_box(x5, c, gh, gw, &sample.object_box, stride);
    let fh = gmp(&xh, c, hh * hw);
    let fo = gmp(&xo, c, oh * ow);
    let mo = guided(&fo, x5, c, n);
    let mh = guided(&fh, x5, c, n);

    let mut weighted = vec![0.0; c * hh * hw];
    for ch in 0..c {
        for j in 0..hh * hw {
            weighted[ch * hh * hw + j] = xh[ch * hh * hw + j] * fo[ch];
        }
    }
    let ik = get(p, "purpose.interaction.kernel");
    let ib = get(p, "purpose.interaction.bias");
    let conv = kernels::conv2d(&weighted, ik.data(), ib.data(), c, hh, hw, 1, 3, 1);
    let mho = if (hh, hw) == (gh, gw) {
        conv
    } else {
        kernels::bilinear_resize(&conv, 1, hh, hw, gh, gw)
    };

    let mut f_sup = vec![f64::NEG_INFINITY; c];
    for ch in 0..c {
        for j in 0..n {
            let v = mho[j] * mh[ch * n + j] + mho[j] * mo[ch * n + j];
            f_sup[ch] = f_sup[ch].max(v);
        }
    }
    f_sup
}

fn transfer(x: &[f64], f: &[f64], c: usize, n: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..n)
        .map(|j| (0..c).map(|ch| x[ch * n + j] * f[ch]).sum())
        .collect();
    let alpha = softmax_1d(&scores);
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for j in 0..n {
            out[ch * n + j] = x[ch * n + j] * (1.0 + alpha[j]);
        }
    }
    out
}

fn normalize_rows(mu: &mut [f64], k: usize, c: usize) {
    for row in 0..k {
        let norm: f64 = mu[row * c..(row + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut mu[row * c..(row + 1) * c] {
                *v /= norm;
            }
        }
    }
}

fn row_softmax_against(f: &[f64], n: usize, c: usize, mu: &[f64], k: usize) -> Vec<f64> {
    let mut z = vec![0.0; n * k];
    for j in 0..n {
        let logits: Vec<f64> = (0..k)
            .map(|kk| (0..c).map(|cc| f[j * c + cc] * mu[kk * c + cc]).sum())
            .collect();
        let sm = softmax_1d(&logits);
        z[j * k..(j + 1) * k].copy_from_slice(&sm);
    }
    z
}

/// Collaboration enhancement on transferred level-5 maps, scripted.
fn enhance(
    p: &P,
    xs: &[Vec<f64>],
    c: usize,
    h: usize,
    w: usize,
    k_bases: usize,
    c_proj: usize,
    iterations: usize,
) -> Vec<Vec<f64>> {
    let n = h * w;
    let pk = get(p, "collab.proj.kernel");
    let pb = get(p, "collab.proj.bias");
    let features: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let proj = kernels::conv2d(x, pk.data(), pb.data(), c, h, w, c_proj, 1, 1);
            let mut rows = vec![0.0; n * c_proj];
            for j in 0..n {
                for cc in 0..c_proj {
                    rows[j * c_proj + cc] = proj[cc * n + j];
                }
            }
            rows
        })
        .collect();

    let mut mu_e = get(p, "collab.mu0").data().to_vec();
    normalize_rows(&mut mu_e, k_bases, c_proj);
    let mut mu_final = mu_e.clone();
    for t in 0..iterations {
        if t > 0 {
            mu_e = mu_final.clone();
        }
        let zs: Vec<Vec<f64>> = features
            .iter()
            .map(|f| row_softmax_against(f, n, c_proj, &mu_e, k_bases))
            .collect();
        let mut raw = vec![0.0; k_bases * c_proj];
        for kk in 0..k_bases {
            let mut denom = 0.0;
            for (f, z) in features.iter().zip(&zs) {
                for j in 0..n {
                    denom += z[j * k_bases + kk];
                    for cc in 0..c_proj {
                        raw[kk * c_proj + cc] += z[j * k_bases + kk] * f[j * c_proj + cc];
                    }
                }
            }
            for cc in 0..c_proj {
                raw[kk * c_proj + cc] /= denom;
            }
        }
        normalize_rows(&mut raw, k_bases, c_proj);
        mu_final = raw;
    }

    let ok = get(p, "collab.out.kernel");
    let ob = get(p, "collab.out.bias");
    xs.iter()
        .zip(&features)
        .map(|(x, f)| {
            let z = row_softmax_against(f, n, c_proj, &mu_e, k_bases);
            let mut map = vec![0.0; c_proj * n];
            for j in 0..n {
                for cc in 0..c_proj {
                    let rec: f64 = (0..k_bases)
                        .map(|kk| z[j * k_bases + kk] * mu_final[kk * c_proj + cc])
                        .sum();
                    map[cc * n + j] = rec;
                }
            }
            let res = kernels::conv2d(&map, ok.data(), ob.data(), c_proj, h, w, c, 1, 1);
            x.iter().zip(&res).map(|(a, b)| a + b).collect()
        })
        .collect()
}

fn decode_and_loss(
    p: &P,
    channels: &[usize; 5],
    width: usize,
    pyr: &Pyramid,
    x5hat: &[f64],
    mask: &Tensor<f64>,
) -> f64 {
    let conv = |x: &[f64], cin: usize, h: usize, w: usize, cout: usize, name: &str| -> Vec<f64> {
        let k = get(p, &format!("{name}.kernel"));
        let b = get(p, &format!("{name}.bias"));
        kernels::conv2d(x, k.data(), b.data(), cin, h, w, cout, 3, 1)
    };
    // Top-down recurrence.
    let (_, _, h5, w5) = pyr.levels[4];
    let mut p5 = conv(x5hat, channels[4], h5, w5, width, "decoder.in5");
    leaky(&mut p5);
    let mut features: Vec<(Vec<f64>, usize, usize)> = vec![(p5, h5, w5)];
    for m in (1..=4).rev() {
        let (prev, ph, pw) = features.last().unwrap().clone();
        let up = kernels::bilinear_resize(&prev, width, ph, pw, 2 * ph, 2 * pw);
        let (ref xm, cm, hm, wm) = pyr.levels[m - 1];
        let lat = conv(xm, cm, hm, wm, width, &format!("decoder.lateral{m}"));
        let summed: Vec<f64> = up.iter().zip(&lat).map(|(a, b)| a + b).collect();
        let mut fused = conv(&summed, width, hm, wm, width, &format!("decoder.fuse{m}"));
        leaky(&mut fused);
        features.push((fused, hm, wm));
    }
    features.reverse(); // levels 1..=5

    let (mh, mw) = (mask.shape()[1], mask.shape()[2]);
    let n = (mh * mw) as f64;
    let mut total = 0.0;
    for m in 1..=5usize {
        let (ref f, h, w) = features[m - 1];
        let logits = conv(f, width, h, w, 1, &format!("decoder.head{m}"));
        let mut d: Vec<f64> = logits.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let (mut ch_, mut cw) = (h, w);
        for _ in 0..m {
            d = kernels::bilinear_resize(&d, 1, ch_, cw, 2 * ch_, 2 * cw);
            ch_ *= 2;
            cw *= 2;
        }
        assert_eq!((ch_, cw), (mh, mw));
        let mut level = 0.0;
        for (pv, gv) in d.iter().zip(mask.data()) {
            let pc = pv.clamp(1e-7, 1.0 - 1e-7);
            level += if *gv == 1.0 { pc.ln() } else { (1.0 - pc).ln() };
        }
        total += -level / n;
    }
    total
}

#[test]
fn taped_episode_loss_matches_straight_line_script() {
    let cfg = ModelConfig {
        encoder_channels: [4, 6, 8, 8, 8],
        projected_channels: 6,
        decoder_channels: 5,
        k_bases: 4,
        em_iterations: 3,
    };
    let model32 = Model::<f32>::init(cfg.clone(), 1234);
    let mut model64 = Model::<f64>::init(cfg.clone(), 1234);
    for (dst, src) in model64.params_mut().into_iter().zip(model32.params()) {
        *dst.1 = src.1.cast();
    }

    let ep32 = generate_synthetic(77, 1, 3).unwrap();
    let support = SupportSample {
        image: ep32.support.image.cast::<f64>(),
        human_box: ep32.support.human_box,
        object_box: ep32.support.object_box,
    };
    let queries: Vec<Tensor<f64>> = ep32.queries.iter().map(|q| q.cast()).collect();
    let masks: Vec<Tensor<f64>> = ep32.gt_masks.iter().map(|m| m.cast()).collect();

    // Taped pass.
    let tape = Tape::new();
    let vars = model64.bind(&tape, false);
    let (loss, _) = vars.forward_loss(&support, &queries, &masks).unwrap();
    let taped = loss.scalar_value();

    // Scripted pass.
    let params: P = model64
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let sup_pyr = encode(&params, &cfg.encoder_channels, &support.image);
    let f_sup = purpose_vector(&params, &sup_pyr, &support);

    let pyramids: Vec<Pyramid> = queries
        .iter()
        .map(|q| encode(&params, &cfg.encoder_channels, q))
        .collect();
    let (c5, h5, w5) = {
        let l = &pyramids[0].levels[4];
        (l.1, l.2, l.3)
    };
    let transferred: Vec<Vec<f64>> = pyramids
        .iter()
        .map(|p| transfer(&p.levels[4].0, &f_sup, c5, h5 * w5))
        .collect();
    let enhanced = enhance(
        &params,
        &transferred,
        c5,
        h5,
        w5,
        cfg.k_bases,
        cfg.projected_channels,
        cfg.em_iterations,
    );

    let mut scripted = 0.0;
    for ((pyr, x5hat), mask) in pyramids.iter().zip(&enhanced).zip(&masks) {
        scripted += decode_and_loss(
            &params,
            &cfg.encoder_channels,
            cfg.decoder_channels,
            pyr,
            x5hat,
            mask,
        );
    }

    let diff = (taped - scripted).abs();
    assert!(
        diff < 1e-6,
        "taped {taped} vs scripted {scripted} (|diff| {diff})"
    );
}
