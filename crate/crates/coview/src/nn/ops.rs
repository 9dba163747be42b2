//! Differentiable tensor operations used by the segmentation and matching
//! networks. Activations are `[C, H, W]`, conv weights `[O, C, kh, kw]`,
//! transposed-conv weights `[C, O, k, k]`.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use super::loss;
use super::var::{c, Elem, Op, Var};

fn as3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a [C,H,W] tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

/// Unfold `[C,H,W]` into `[C*kh*kw, Ho*Wo]` patch columns.
fn im2col<F: Elem>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, usize, usize) {
    let (ch, h, w) = as3(x.shape());
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let n = ho * wo;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![F::zero(); ch * kh * kw * n];
    for ci in 0..ch {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    let dst_row = row_base + oy * wo;
                    if stride == 1 {
                        let off = kj as isize - pad as isize;
                        let ox_start = (-off).max(0) as usize;
                        let ox_end = ((w as isize - off).min(wo as isize)).max(0) as usize;
                        if ox_end > ox_start {
                            let len = ox_end - ox_start;
                            let src = src_row + (ox_start as isize + off) as usize;
                            cols[dst_row + ox_start..dst_row + ox_start + len]
                                .copy_from_slice(&xs[src..src + len]);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst_row + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec((ch * kh * kw, n), cols).expect("col shape"),
        ho,
        wo,
    )
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[C,H,W]`.
fn col2im<F: Elem>(
    cols: &Array2<F>,
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let n = ho * wo;
    debug_assert_eq!(cols.dim(), (ch * kh * kw, n));
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); ch * h * w];
    for ci in 0..ch {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += cs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), out).expect("im shape")
}

/// 2-D convolution with stride 1 unless noted otherwise; `w` is `[O,C,kh,kw]`.
pub fn conv2d<F: Elem>(x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>, pad: usize) -> Var<F> {
    let (ci, h, wd) = as3(x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be 4-d");
    let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(wc, ci, "conv input channels: weight {wc} vs input {ci}");

    let (cols, ho, wo) = im2col(x.data(), kh, kw, 1, pad);
    let w2 = w
        .data()
        .view()
        .into_shape_with_order((o, ci * kh * kw))
        .expect("weight reshape");
    let mut out2 = w2.dot(&cols);
    if let Some(b) = b {
        let bs = b.data().view().into_shape_with_order(o).expect("bias shape");
        for (mut row, bv) in out2.axis_iter_mut(Axis(0)).zip(bs.iter()) {
            row.mapv_inplace(|v| v + *bv);
        }
    }
    let data = out2.into_shape_with_order(IxDyn(&[o, ho, wo])).expect("out shape");

    let x_c = x.clone();
    let w_c = w.clone();
    let has_bias = b.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Var::from_op(
        data,
        Op {
            parents,
            backward: Box::new(move |g| {
                let g2 = g
                    .view()
                    .into_shape_with_order((o, ho * wo))
                    .expect("grad reshape");
                let w2 = w_c
                    .data()
                    .view()
                    .into_shape_with_order((o, ci * kh * kw))
                    .expect("weight reshape");
                let dx = if x_c.needs_grad() {
                    let dcols = w2.t().dot(&g2);
                    Some(col2im(&dcols, ci, h, wd, kh, kw, 1, pad))
                } else {
                    None
                };
                let dw = if w_c.needs_grad() {
                    let dw2 = g2.dot(&cols.t());
                    Some(
                        dw2.into_shape_with_order(IxDyn(&[o, ci, kh, kw]))
                            .expect("dw shape"),
                    )
                } else {
                    None
                };
                let mut out = vec![dx, dw];
                if has_bias {
                    let db = g2.sum_axis(Axis(1));
                    out.push(Some(db.into_dyn()));
                }
                out
            }),
        },
    )
}

/// Transposed convolution (upsampling); `w` is `[C, O, k, k]`.
/// Output spatial size is `stride*(in-1) + k - 2*pad`.
pub fn conv_transpose2d<F: Elem>(x: &Var<F>, w: &Var<F>, stride: usize, pad: usize) -> Var<F> {
    let (ci, h, wd) = as3(x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "deconv weight must be 4-d");
    let (wc, o, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(k, k2, "deconv kernel must be square");
    assert_eq!(wc, ci, "deconv input channels: weight {wc} vs input {ci}");
    let hs = stride * (h - 1) + k - 2 * pad;
    let wss = stride * (wd - 1) + k - 2 * pad;

    let x2 = x
        .data()
        .view()
        .into_shape_with_order((ci, h * wd))
        .expect("input reshape");
    let w2 = w
        .data()
        .view()
        .into_shape_with_order((ci, o * k * k))
        .expect("weight reshape");
    let cols = w2.t().dot(&x2); // [O*k*k, H*W]
    let data = col2im(&cols, o, hs, wss, k, k, stride, pad);

    let x_c = x.clone();
    let w_c = w.clone();
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone(), w.clone()],
            backward: Box::new(move |g| {
                let (gcols, gho, gwo) = im2col(g, k, k, stride, pad);
                debug_assert_eq!((gho, gwo), (h, wd));
                let w2 = w_c
                    .data()
                    .view()
                    .into_shape_with_order((ci, o * k * k))
                    .expect("weight reshape");
                let dx = if x_c.needs_grad() {
                    Some(
                        w2.dot(&gcols)
                            .into_shape_with_order(IxDyn(&[ci, h, wd]))
                            .expect("dx shape"),
                    )
                } else {
                    None
                };
                let dw = if w_c.needs_grad() {
                    let x2 = x_c
                        .data()
                        .view()
                        .into_shape_with_order((ci, h * wd))
                        .expect("input reshape");
                    Some(
                        x2.dot(&gcols.t())
                            .into_shape_with_order(IxDyn(&[ci, o, k, k]))
                            .expect("dw shape"),
                    )
                } else {
                    None
                };
                vec![dx, dw]
            }),
        },
    )
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in scan
/// order, which keeps backward deterministic.
pub fn maxpool2x2<F: Elem>(x: &Var<F>) -> Var<F> {
    let (ch, h, w) = as3(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data().as_slice().expect("standard layout");
    let mut out = vec![F::zero(); ch * ho * wo];
    let mut argmax = vec![0u32; ch * ho * wo];
    for ci in 0..ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = (ci * h + oy * 2) * w + ox * 2;
                let mut best = xs[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
                    if xs[idx] > best {
                        best = xs[idx];
                        best_idx = idx;
                    }
                }
                let oidx = (ci * ho + oy) * wo + ox;
                out[oidx] = best;
                argmax[oidx] = best_idx as u32;
            }
        }
    }
    let data = ArrayD::from_shape_vec(IxDyn(&[ch, ho, wo]), out).expect("pool shape");
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone()],
            backward: Box::new(move |g| {
                let gs = g.as_slice().expect("standard layout");
                let mut dx = vec![F::zero(); ch * h * w];
                for (i, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += gs[i];
                }
                vec![Some(
                    ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), dx).expect("dx shape"),
                )]
            }),
        },
    )
}

pub fn relu<F: Elem>(x: &Var<F>) -> Var<F> {
    let data = x.data().mapv(|v| if v > F::zero() { v } else { F::zero() });
    let x_c = x.clone();
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone()],
            backward: Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(x_c.data(), |gv, &xv| {
                    if xv <= F::zero() {
                        *gv = F::zero();
                    }
                });
                vec![Some(dx)]
            }),
        },
    )
}

/// Per-pixel softmax over the channel axis of a `[C,H,W]` tensor.
pub fn softmax_channels<F: Elem>(x: &Var<F>) -> Var<F> {
    let (ch, h, w) = as3(x.shape());
    let n = h * w;
    let xs = x.data().as_slice().expect("standard layout");
    let mut out = vec![F::zero(); ch * n];
    for p in 0..n {
        let mut m = xs[p];
        for ci in 1..ch {
            m = m.max(xs[ci * n + p]);
        }
        let mut z = F::zero();
        for ci in 0..ch {
            let e = (xs[ci * n + p] - m).exp();
            out[ci * n + p] = e;
            z = z + e;
        }
        for ci in 0..ch {
            out[ci * n + p] = out[ci * n + p] / z;
        }
    }
    let data = ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), out).expect("softmax shape");
    let probs = data.clone();
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone()],
            backward: Box::new(move |g| {
                let gs = g.as_slice().expect("standard layout");
                let ps = probs.as_slice().expect("standard layout");
                let mut dx = vec![F::zero(); ch * n];
                for p in 0..n {
                    let mut dot = F::zero();
                    for ci in 0..ch {
                        dot = dot + gs[ci * n + p] * ps[ci * n + p];
                    }
                    for ci in 0..ch {
                        dx[ci * n + p] = ps[ci * n + p] * (gs[ci * n + p] - dot);
                    }
                }
                vec![Some(
                    ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), dx).expect("dx shape"),
                )]
            }),
        },
    )
}

/// Concatenate `[C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<F: Elem>(xs: &[&Var<F>]) -> Var<F> {
    assert!(!xs.is_empty());
    let (_, h, w) = as3(xs[0].shape());
    let channels: Vec<usize> = xs
        .iter()
        .map(|x| {
            let (ci, hi, wi) = as3(x.shape());
            assert_eq!((hi, wi), (h, w), "concat spatial mismatch");
            ci
        })
        .collect();
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(total * h * w);
    for x in xs {
        out.extend_from_slice(x.data().as_slice().expect("standard layout"));
    }
    let data = ArrayD::from_shape_vec(IxDyn(&[total, h, w]), out).expect("concat shape");
    let parents: Vec<Var<F>> = xs.iter().map(|&x| x.clone()).collect();
    Var::from_op(
        data,
        Op {
            parents,
            backward: Box::new(move |g| {
                let gs = g.as_slice().expect("standard layout");
                let mut outs = Vec::with_capacity(channels.len());
                let mut offset = 0usize;
                for &ci in &channels {
                    let len = ci * h * w;
                    outs.push(Some(
                        ArrayD::from_shape_vec(IxDyn(&[ci, h, w]), gs[offset..offset + len].to_vec())
                            .expect("split shape"),
                    ));
                    offset += len;
                }
                outs
            }),
        },
    )
}

/// Elementwise sum of two same-shape tensors.
pub fn add<F: Elem>(a: &Var<F>, b: &Var<F>) -> Var<F> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let data = a.data() + b.data();
    Var::from_op(
        data,
        Op {
            parents: vec![a.clone(), b.clone()],
            backward: Box::new(move |g| vec![Some(g.clone()), Some(g.clone())]),
        },
    )
}

pub fn scale<F: Elem>(x: &Var<F>, k: F) -> Var<F> {
    let data = x.data().mapv(|v| v * k);
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone()],
            backward: Box::new(move |g| vec![Some(g.mapv(|v| v * k))]),
        },
    )
}

/// Multiply every channel of `feats` (`[C,h,w]`) by a single-channel map
/// (`[1,h,w]`), i.e. tile the map across channels.
pub fn mul_channel_broadcast<F: Elem>(feats: &Var<F>, map: &Var<F>) -> Var<F> {
    let (ch, h, w) = as3(feats.shape());
    let (mc, mh, mw) = as3(map.shape());
    assert_eq!(mc, 1, "broadcast map must have one channel");
    assert_eq!((mh, mw), (h, w), "broadcast map spatial mismatch");
    let n = h * w;
    let fs = feats.data().as_slice().expect("standard layout");
    let ms = map.data().as_slice().expect("standard layout");
    let mut out = vec![F::zero(); ch * n];
    for ci in 0..ch {
        for p in 0..n {
            out[ci * n + p] = fs[ci * n + p] * ms[p];
        }
    }
    let data = ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), out).expect("mul shape");
    let f_c = feats.clone();
    let m_c = map.clone();
    Var::from_op(
        data,
        Op {
            parents: vec![feats.clone(), map.clone()],
            backward: Box::new(move |g| {
                let gs = g.as_slice().expect("standard layout");
                let fs = f_c.data().as_slice().expect("standard layout");
                let ms = m_c.data().as_slice().expect("standard layout");
                let dfeats = if f_c.needs_grad() {
                    let mut df = vec![F::zero(); ch * n];
                    for ci in 0..ch {
                        for p in 0..n {
                            df[ci * n + p] = gs[ci * n + p] * ms[p];
                        }
                    }
                    Some(ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), df).expect("df shape"))
                } else {
                    None
                };
                let dmap = if m_c.needs_grad() {
                    let mut dm = vec![F::zero(); n];
                    for ci in 0..ch {
                        for p in 0..n {
                            dm[p] += gs[ci * n + p] * fs[ci * n + p];
                        }
                    }
                    Some(ArrayD::from_shape_vec(IxDyn(&[1, h, w]), dm).expect("dm shape"))
                } else {
                    None
                };
                vec![dfeats, dmap]
            }),
        },
    )
}

/// Non-overlapping average pooling by an integer factor.
pub fn avg_pool<F: Elem>(x: &Var<F>, factor: usize) -> Var<F> {
    let (ch, h, w) = as3(x.shape());
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0, "avg_pool factor must divide dims");
    let (ho, wo) = (h / factor, w / factor);
    let norm = c::<F>(1.0 / (factor * factor) as f64);
    let xs = x.data().as_slice().expect("standard layout");
    let mut out = vec![F::zero(); ch * ho * wo];
    for ci in 0..ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = F::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc = acc + xs[(ci * h + oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[(ci * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    let data = ArrayD::from_shape_vec(IxDyn(&[ch, ho, wo]), out).expect("avg shape");
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone()],
            backward: Box::new(move |g| {
                let gs = g.as_slice().expect("standard layout");
                let mut dx = vec![F::zero(); ch * h * w];
                for ci in 0..ch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gs[(ci * ho + oy) * wo + ox] * norm;
                            for dy in 0..factor {
                                for dx_ in 0..factor {
                                    dx[(ci * h + oy * factor + dy) * w + ox * factor + dx_] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(
                    ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), dx).expect("dx shape"),
                )]
            }),
        },
    )
}

/// Extract one channel as a `[1,H,W]` tensor.
pub fn channel<F: Elem>(x: &Var<F>, index: usize) -> Var<F> {
    let (ch, h, w) = as3(x.shape());
    assert!(index < ch, "channel index out of range");
    let n = h * w;
    let xs = x.data().as_slice().expect("standard layout");
    let data = ArrayD::from_shape_vec(IxDyn(&[1, h, w]), xs[index * n..(index + 1) * n].to_vec())
        .expect("channel shape");
    Var::from_op(
        data,
        Op {
            parents: vec![x.clone()],
            backward: Box::new(move |g| {
                let gs = g.as_slice().expect("standard layout");
                let mut dx = vec![F::zero(); ch * n];
                dx[index * n..(index + 1) * n].copy_from_slice(gs);
                vec![Some(
                    ArrayD::from_shape_vec(IxDyn(&[ch, h, w]), dx).expect("dx shape"),
                )]
            }),
        },
    )
}

/// Pixel-summed cross entropy of foreground probabilities against a binary
/// target (a constant), as a scalar graph node.
pub fn seg_loss_op<F: Elem>(fg_probs: &Var<F>, target: &ArrayD<F>) -> Var<F> {
    assert_eq!(fg_probs.shape(), target.shape(), "seg loss target shape mismatch");
    let (value, grad) = loss::seg_loss_value_grad(fg_probs.data(), target);
    let data = ArrayD::from_elem(IxDyn(&[]), value);
    Var::from_op(
        data,
        Op {
            parents: vec![fg_probs.clone()],
            backward: Box::new(move |g| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![Some(grad.mapv(|d| d * gv))]
            }),
        },
    )
}

/// Generalized contrastive loss for a single exemplar pair, as a scalar
/// graph node. `positive` is the correspondence label y.
pub fn contrastive_op<F: Elem>(a: &Var<F>, b: &Var<F>, positive: bool, margin: F) -> Var<F> {
    assert_eq!(a.shape(), b.shape(), "contrastive shape mismatch");
    let a4 = a.data().clone().insert_axis(Axis(0));
    let b4 = b.data().clone().insert_axis(Axis(0));
    let y = Array1::from_vec(vec![positive]);
    let (value, ga, gb) = loss::contrastive_value_grad(&a4, &b4, &y, margin);
    let ga = ga.remove_axis(Axis(0));
    let gb = gb.remove_axis(Axis(0));
    let data = ArrayD::from_elem(IxDyn(&[]), value);
    Var::from_op(
        data,
        Op {
            parents: vec![a.clone(), b.clone()],
            backward: Box::new(move |g| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![Some(ga.mapv(|d| d * gv)), Some(gb.mapv(|d| d * gv))]
            }),
        },
    )
}
