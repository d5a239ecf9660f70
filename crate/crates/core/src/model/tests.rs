use super::*;
use crate::autodiff::{rng, Tape, Tensor};
use crate::codec::image::Image;
use crate::gmm;
use crate::special;
use rand::Rng;

fn cfg(channels: usize, patch: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 2,
        heads: 2,
        mixtures: 3,
        patch,
        global_tokens: 4,
        channels,
    }
}

/// Checkpoint with non-trivial biases and gains so every parameter matters.
fn ckpt(config: ModelConfig, seed: u64) -> Checkpoint {
    let mut c = Checkpoint::init(config, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xabc);
    let vals: Vec<Vec<f64>> = c
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|&v| v * 10.0 + r.random_range(-0.2..0.2)).collect())
        .collect();
    c.set_values(&vals).unwrap();
    c
}

fn random_image(r: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
    Image::new(w, h, c, (0..w * h * c).map(|_| r.random()).collect()).unwrap()
}

fn random_patch(r: &mut impl Rng, w: usize, h: usize, c: usize) -> PatchInput {
    PatchInput {
        width: w,
        height: h,
        lossy: (0..w * h * c).map(|_| r.random()).collect(),
        residuals: (0..w * h * c).map(|_| r.random_range(-20..=20)).collect(),
    }
}

// ---- straight-line reference ------------------------------------------------

fn t<'a>(c: &'a Checkpoint, name: &str) -> &'a [f64] {
    c.tensor(name).unwrap().data()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + special::erf(x / 2f64.sqrt()))
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-10).sqrt() * g + b)
        .collect()
}

fn affine_map(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    (0..cols)
        .map(|j| b[j] + x.iter().enumerate().map(|(k, v)| v * w[k * cols + j]).sum::<f64>())
        .collect()
}

fn reference_global(c: &Checkpoint, img: &Image) -> Vec<Vec<f64>> {
    let cf = &c.config;
    let (w0, h0) = (img.width().max(32), img.height().max(32));
    let mut chans = img.channels();
    let (mut h, mut w) = (h0, w0);
    let mut x: Vec<f64> = Vec::new();
    for ch in 0..chans {
        for y in 0..h {
            for xx in 0..w {
                let v = img.get(xx.min(img.width() - 1), y.min(img.height() - 1), ch);
                x.push(v as f64 / 127.5 - 1.0);
            }
        }
    }
    let outs = [16, 32, 64, cf.d];
    for (i, &o) in outs.iter().enumerate() {
        let wt = t(c, &format!("global.conv{i}.weight"));
        let bs = t(c, &format!("global.conv{i}.bias"));
        let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let mut y = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bs[oc];
                    for ic in 0..chans {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = x[(ic * h + iy as usize) * w + ix as usize];
                                s += v * wt[oc * chans * 9 + ic * 9 + ky * 3 + kx];
                            }
                        }
                    }
                    y[(oc * oh + oy) * ow + ox] = if i < 3 { gelu(s) } else { s };
                }
            }
        }
        x = y;
        chans = o;
        h = oh;
        w = ow;
    }
    let (gh, gw) = cf.global_grid();
    let pos = t(c, "pos.embed");
    let mut tokens = vec![vec![0.0; cf.d]; gh * gw];
    for ch in 0..cf.d {
        for by in 0..gh {
            for bx in 0..gw {
                let (y0, y1) = (by * h / gh, ((by + 1) * h).div_ceil(gh));
                let (x0, x1) = (bx * w / gw, ((bx + 1) * w).div_ceil(gw));
                let mut s = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s += x[(ch * h + yy) * w + xx];
                    }
                }
                tokens[by * gw + bx][ch] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    for (j, tok) in tokens.iter_mut().enumerate() {
        for (k, v) in tok.iter_mut().enumerate() {
            *v += pos[j * cf.d + k];
        }
    }
    tokens
}

fn reference_head(c: &Checkpoint, img: &Image, p: &PatchInput) -> Vec<Vec<f64>> {
    let cf = &c.config;
    let d = cf.d;
    let row = |name: &str, i: usize| t(c, name)[i * d..(i + 1) * d].to_vec();
    let mut seq = reference_global(c, img);
    let np = p.width * p.height;
    for y in 0..p.height {
        for x in 0..p.width {
            let j = y * p.width + x;
            let mut e = row("pos.embed", cf.global_tokens + y * cf.patch + x);
            for ch in 0..cf.channels {
                let v = p.lossy[j * cf.channels + ch] as usize;
                let emb = row("local.embed", ch * 256 + v);
                e.iter_mut().zip(emb).for_each(|(a, b)| *a += b);
            }
            seq.push(e);
        }
    }
    let prompt = seq.len();
    let l = p.residuals.len();
    for i in 0..l {
        let (ch, rem) = (i / np, i % np);
        let (y, x) = (rem / p.width, rem % p.width);
        let slot = cf.global_tokens + cf.patch * cf.patch + ch * cf.patch * cf.patch + y * cf.patch + x;
        let tok = if i == 0 { 511 } else { (p.residuals[i - 1] + 255) as usize };
        let mut e = row("residual.embed", tok);
        e.iter_mut().zip(row("pos.embed", slot)).for_each(|(a, b)| *a += b);
        seq.push(e);
    }
    let n = seq.len();
    let dh = d / cf.heads;
    for li in 0..cf.layers {
        let g = |s: &str| t(c, &format!("layer{li}.{s}"));
        let h: Vec<Vec<f64>> = seq.iter().map(|x| layer_norm(x, g("ln1.gamma"), g("ln1.beta"))).collect();
        let q: Vec<_> = h.iter().map(|x| affine_map(x, g("attn.wq"), g("attn.bq"))).collect();
        let k: Vec<_> = h.iter().map(|x| affine_map(x, g("attn.wk"), g("attn.bk"))).collect();
        let v: Vec<_> = h.iter().map(|x| affine_map(x, g("attn.wv"), g("attn.bv"))).collect();
        for i in 0..n {
            let mut a = vec![0.0; d];
            for hd in 0..cf.heads {
                let r = hd * dh..(hd + 1) * dh;
                let allowed: Vec<usize> = (0..n).filter(|&j| if i < prompt { j < prompt } else { j <= i }).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (s, &j) in scores.iter().zip(&allowed) {
                    for e in r.clone() {
                        a[e] += (s - m).exp() / z * v[j][e];
                    }
                }
            }
            let o = affine_map(&a, g("attn.wo"), g("attn.bo"));
            seq[i].iter_mut().zip(o).for_each(|(x, y)| *x += y);
        }
        for x in seq.iter_mut() {
            let h = layer_norm(x, g("ln2.gamma"), g("ln2.beta"));
            let mid: Vec<f64> = affine_map(&h, g("mlp.w1"), g("mlp.b1")).into_iter().map(gelu).collect();
            let o = affine_map(&mid, g("mlp.w2"), g("mlp.b2"));
            x.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
    }
    seq[prompt..]
        .iter()
        .map(|x| {
            let h = layer_norm(x, t(c, "final.ln.gamma"), t(c, "final.ln.beta"));
            affine_map(&h, t(c, "head.weight"), t(c, "head.bias"))
        })
        .collect()
}

fn tape_head(c: &Checkpoint, img: &Image, p: &PatchInput) -> Tensor {
    let mut tape = Tape::inference();
    let vars = register_params(&mut tape, c);
    let head = tape_forward(&mut tape, &vars, c, img, p).unwrap();
    tape.value(head).clone()
}

fn sequential_heads(c: &Checkpoint, img: &Image, p: &PatchInput) -> Vec<Vec<f64>> {
    let m = InferenceModel::<f64>::new(c);
    let g = m.global_tokens(img).unwrap();
    let mut ctx = m.patch(&g, p.width, p.height, &p.lossy).unwrap();
    let mut out = Vec::new();
    for &r in &p.residuals {
        out.push(ctx.raw_head().to_vec());
        ctx.push(r).unwrap();
    }
    out
}

// ---- tests ------------------------------------------------------------------

#[test]
fn tape_matches_straight_line_reference() {
    let mut r = rng::seeded(1);
    for (channels, (w, h), (iw, ih)) in [(1, (3, 3), (5, 40)), (3, (2, 3), (33, 7)), (3, (3, 3), (64, 64))] {
        let c = ckpt(cfg(channels, 3), 11 + channels as u64);
        let img = random_image(&mut r, iw, ih, channels);
        let p = random_patch(&mut r, w, h, channels);
        let got = tape_head(&c, &img, &p);
        let want = reference_head(&c, &img, &p);
        assert_eq!(got.rows(), want.len());
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "row {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn teacher_forcing_matches_sequential_bit_exact() {
    let mut r = rng::seeded(2);
    for case in 0..6 {
        let channels = if case % 2 == 0 { 1 } else { 3 };
        let c = ckpt(cfg(channels, 4), case);
        let img = random_image(&mut r, 9, 12, channels);
        let (w, h) = (r.random_range(1..=4), r.random_range(1..=4));
        let p = random_patch(&mut r, w, h, channels);
        let tf = tape_head(&c, &img, &p);
        let seq = sequential_heads(&c, &img, &p);
        for (i, s) in seq.iter().enumerate() {
            assert_eq!(tf.row(i), s.as_slice(), "case {case} row {i}");
        }
        let batch = forward_train(&c, &[(&img, &p)]).unwrap();
        let m = InferenceModel::<f64>::new(&c);
        let g = m.global_tokens(&img).unwrap();
        let mut ctx = m.patch(&g, w, h, &p.lossy).unwrap();
        for (j, params) in batch[0].iter().enumerate() {
            assert_eq!(gmm::canonical_round(params), ctx.predict_next().unwrap());
            ctx.push(p.residuals[j]).unwrap();
        }
    }
}

#[test]
fn predictions_ignore_future_residuals() {
    let mut r = rng::seeded(3);
    let c = ckpt(cfg(3, 3), 7);
    let img = random_image(&mut r, 6, 6, 3);
    let p = random_patch(&mut r, 3, 3, 3);
    let base = tape_head(&c, &img, &p);
    for j in [0, 5, 13, 26] {
        let mut q = p.clone();
        for v in q.residuals[j..].iter_mut() {
            *v = r.random_range(-255..=255);
        }
        let other = tape_head(&c, &img, &q);
        for i in 0..=j {
            assert_eq!(base.row(i), other.row(i), "position {i} saw a change at {j}");
        }
        if j + 1 < p.residuals.len() && q.residuals[j] != p.residuals[j] {
            assert_ne!(base.row(j + 1), other.row(j + 1));
        }
    }
}

#[test]
fn global_tokens_depend_only_on_image() {
    let mut r = rng::seeded(4);
    let c = ckpt(cfg(1, 4), 8);
    let m = InferenceModel::<f32>::new(&c);
    let img = random_image(&mut r, 20, 50, 1);
    let a = m.global_tokens(&img).unwrap();
    assert_eq!(a, m.global_tokens(&img).unwrap());
    let other = random_image(&mut r, 20, 50, 1);
    assert_ne!(a, m.global_tokens(&other).unwrap());
    assert!(m.global_tokens(&random_image(&mut r, 4, 4, 3)).is_err());
}

#[test]
fn zero_conv_weights_leave_biases() {
    let base = ckpt(cfg(1, 2), 9);
    let mut vals: Vec<Vec<f64>> = base.tensors().iter().map(|t| t.data().to_vec()).collect();
    for (i, name) in base.names().iter().enumerate() {
        if name.starts_with("global.conv") && name.ends_with("weight") {
            vals[i].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut c = base.clone();
    c.set_values(&vals).unwrap();
    let m = InferenceModel::<f64>::new(&c);
    let g = m.global_tokens(&Image::filled(5, 5, 1, 0).unwrap()).unwrap();
    let bias = c.tensor("global.conv3.bias").unwrap().data();
    let pos = c.tensor("pos.embed").unwrap().data();
    for (j, tok) in g.chunks(c.config.d).enumerate() {
        for (k, v) in tok.iter().enumerate() {
            assert_eq!(*v, bias[k] + pos[j * c.config.d + k]);
        }
    }
}

#[test]
fn local_tokens_differ_only_by_position() {
    let c = ckpt(cfg(3, 2), 10);
    let m = InferenceModel::<f64>::new(&c);
    let lossy = [10, 20, 30, 10, 20, 30, 1, 2, 3, 4, 5, 6];
    let tokens = m.local_tokens(2, 2, &lossy).unwrap();
    let d = c.config.d;
    let pos = c.tensor("pos.embed").unwrap().data();
    let slot = |y: usize, x: usize| c.config.local_slot(y, x);
    for k in 0..d {
        let a = tokens[k] - pos[slot(0, 0) * d + k];
        let b = tokens[d + k] - pos[slot(0, 1) * d + k];
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_pixel_patch_and_overlength() {
    let mut r = rng::seeded(5);
    let c = ckpt(cfg(1, 4), 12);
    let img = random_image(&mut r, 3, 3, 1);
    let p = PatchInput {
        width: 1,
        height: 1,
        lossy: vec![9],
        residuals: vec![4],
    };
    let batch = forward_train(&c, &[(&img, &p)]).unwrap();
    assert_eq!(batch[0].len(), 1);
    let m = InferenceModel::<f64>::new(&c);
    let g = m.global_tokens(&img).unwrap();
    let mut ctx = m.patch(&g, 1, 1, &[9]).unwrap();
    assert_eq!(ctx.predict_next().unwrap(), gmm::canonical_round(&batch[0][0]));
    ctx.push(4).unwrap();
    assert!(matches!(ctx.predict_next(), Err(ModelError::PrefixOverlength(1))));
    assert!(matches!(ctx.push(0), Err(ModelError::PrefixOverlength(1))));
}

#[test]
fn shape_errors() {
    let mut r = rng::seeded(6);
    let c = ckpt(cfg(1, 2), 13);
    let img = random_image(&mut r, 3, 3, 1);
    let too_big = random_patch(&mut r, 3, 2, 1);
    assert!(forward_train(&c, &[(&img, &too_big)]).is_err());
    let mut short = random_patch(&mut r, 2, 2, 1);
    short.residuals.pop();
    assert!(forward_train(&c, &[(&img, &short)]).is_err());
}

#[test]
fn f32_inference_tracks_f64() {
    let mut r = rng::seeded(7);
    let c = ckpt(cfg(3, 3), 14);
    let img = random_image(&mut r, 8, 8, 3);
    let p = random_patch(&mut r, 3, 3, 3);
    let want = tape_head(&c, &img, &p);
    let m = InferenceModel::<f32>::new(&c);
    let g = m.global_tokens(&img).unwrap();
    let mut ctx = m.patch(&g, 3, 3, &p.lossy).unwrap();
    for (i, &res) in p.residuals.iter().enumerate() {
        for (a, b) in ctx.raw_head().iter().zip(want.row(i)) {
            assert!((*a as f64 - b).abs() < 1e-3 * (1.0 + b.abs()));
        }
        ctx.push(res).unwrap();
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng::seeded(8);
    let config = ModelConfig {
        d: 4,
        layers: 1,
        heads: 2,
        mixtures: 2,
        patch: 2,
        global_tokens: 1,
        channels: 1,
    };
    let c = ckpt(config, 15);
    let img = random_image(&mut r, 2, 2, 1);
    let mut p = random_patch(&mut r, 2, 2, 1);
    p.residuals = vec![0, 1, -1, 0];
    let report = crate::autodiff::gradcheck::check_with_coverage(
        |tape, vars| {
            let mut probe = c.clone();
            probe.step = 0;
            patch_loss(tape, vars, &probe, &img, &p).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })
        },
        c.tensors(),
        1e-5,
        crate::autodiff::gradcheck::Coverage::Sampled { per_tensor: 8, seed: 1 },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}


