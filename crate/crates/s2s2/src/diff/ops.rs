//! Differentiable operations. Each op validates shapes, computes the
//! forward value, rejects non-finite outputs, and registers a backward
//! closure that scatters the output gradient into its parents.

use super::{check_finite, DiffError, DiffResult, Element, Tensor};

fn shape_err<V>(msg: String) -> DiffResult<V> {
    Err(DiffError::ShapeMismatch(msg))
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> DiffResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("add: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    check_finite("add", &data)?;
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|gout, parents| {
            for p in parents {
                if p.requires_grad() {
                    let mut g = p.grad_mut();
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
            }
        }),
    ))
}

/// Multiply every element by a constant factor.
pub fn scale<T: Element>(a: &Tensor<T>, factor: f64) -> DiffResult<Tensor<T>> {
    let f = T::from_f64(factor);
    let data: Vec<T> = a.data().iter().map(|&x| x * f).collect();
    check_finite("scale", &data)?;
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |gout, parents| {
            let p = &parents[0];
            if p.requires_grad() {
                let mut g = p.grad_mut();
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = *gi + go * f;
                }
            }
        }),
    ))
}

/// Elementwise max(0, x).
pub fn relu<T: Element>(x: &Tensor<T>) -> DiffResult<Tensor<T>> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|gout, parents| {
            let p = &parents[0];
            if p.requires_grad() {
                let pd = p.data().to_vec();
                let mut g = p.grad_mut();
                for i in 0..pd.len() {
                    if pd[i] > T::zero() {
                        g[i] = g[i] + gout[i];
                    }
                }
            }
        }),
    ))
}

/// 2D cross-correlation over `[C_in, H, W]` with kernel
/// `[C_out, C_in, k, k]` (k odd) and per-output-channel bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> DiffResult<Tensor<T>> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 3 || kshape.len() != 4 {
        return shape_err(format!(
            "conv2d: input {:?} kernel {:?}, expected rank 3 and 4",
            ishape, kshape
        ));
    }
    let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (cout, kcin, k, k2) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kcin != cin || k != k2 {
        return shape_err(format!("conv2d: kernel {:?} does not fit input {:?}", kshape, ishape));
    }
    if k % 2 == 0 {
        return Err(DiffError::Invalid(format!("conv2d: kernel size {} must be odd", k)));
    }
    if bias.shape() != [cout] {
        return shape_err(format!("conv2d: bias {:?}, expected [{}]", bias.shape(), cout));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return shape_err(format!("conv2d: input {}x{} too small for k={} p={}", h, w, k, padding));
    }
    let hout = h + 2 * padding - k + 1;
    let wout = w + 2 * padding - k + 1;

    let idata = input.data();
    let kdata = kernel.data();
    let bdata = bias.data();
    let mut out = vec![T::zero(); cout * hout * wout];
    for co in 0..cout {
        let plane = &mut out[co * hout * wout..(co + 1) * hout * wout];
        let b = bdata[co];
        for v in plane.iter_mut() {
            *v = b;
        }
    }
    conv_loops(
        cin, h, w, cout, k, padding, hout, wout,
        |co, ci, ky, kx, oy, ox_lo, ox_hi| {
            let wgt = kdata[((co * cin + ci) * k + ky) * k + kx];
            let iy = oy + ky;
            let iy = iy as isize - padding as isize;
            let in_off = ci * h * w + (iy as usize) * w;
            let shift = kx as isize - padding as isize;
            let in_lo = (ox_lo as isize + shift) as usize;
            let seg = ox_hi - ox_lo;
            let out_off = co * hout * wout + oy * wout + ox_lo;
            let in_row = &idata[in_off + in_lo..in_off + in_lo + seg];
            let dst = &mut out[out_off..out_off + seg];
            for (d, &s) in dst.iter_mut().zip(in_row) {
                *d = *d + wgt * s;
            }
        },
    );
    check_finite("conv2d", &out)?;

    let dims = ConvDims { cin, h, w, cout, k, padding, hout, wout };
    Ok(Tensor::from_op(
        vec![cout, hout, wout],
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |gout, parents| {
            conv2d_backward(gout, parents, dims);
        }),
    ))
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    padding: usize,
    hout: usize,
    wout: usize,
}

/// Shared loop structure: visits every valid (co, ci, ky, kx, oy) with the
/// contiguous ox range for which the input index stays in bounds.
fn conv_loops<F>(
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    padding: usize,
    hout: usize,
    wout: usize,
    mut body: F,
) where
    F: FnMut(usize, usize, usize, usize, usize, usize, usize),
{
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let ox_lo = padding.saturating_sub(kx);
                    let ox_hi = (w + padding).saturating_sub(kx).min(wout);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let oy_lo = padding.saturating_sub(ky);
                    let oy_hi = (h + padding).saturating_sub(ky).min(hout);
                    for oy in oy_lo..oy_hi {
                        body(co, ci, ky, kx, oy, ox_lo, ox_hi);
                    }
                }
            }
        }
    }
}

fn conv2d_backward<T: Element>(gout: &[T], parents: &[Tensor<T>], d: ConvDims) {
    let input = &parents[0];
    let kernel = &parents[1];
    let bias = &parents[2];
    let idata = input.data();
    let kdata = kernel.data();

    if bias.requires_grad() {
        let mut gb = bias.grad_mut();
        for co in 0..d.cout {
            let plane = &gout[co * d.hout * d.wout..(co + 1) * d.hout * d.wout];
            gb[co] = gb[co] + plane.iter().copied().sum();
        }
    }

    let input_needs = input.requires_grad();
    let kernel_needs = kernel.requires_grad();
    if !input_needs && !kernel_needs {
        return;
    }
    let mut gin = if input_needs {
        Some(input.grad_mut())
    } else {
        None
    };
    let mut gw = if kernel_needs {
        Some(kernel.grad_mut())
    } else {
        None
    };
    conv_loops(
        d.cin, d.h, d.w, d.cout, d.k, d.padding, d.hout, d.wout,
        |co, ci, ky, kx, oy, ox_lo, ox_hi| {
            let iy = (oy + ky) as isize - d.padding as isize;
            let in_off = ci * d.h * d.w + (iy as usize) * d.w;
            let shift = kx as isize - d.padding as isize;
            let in_lo = (ox_lo as isize + shift) as usize;
            let seg = ox_hi - ox_lo;
            let out_off = co * d.hout * d.wout + oy * d.wout + ox_lo;
            let gout_row = &gout[out_off..out_off + seg];
            if let Some(gw) = gw.as_mut() {
                let in_row = &idata[in_off + in_lo..in_off + in_lo + seg];
                let dot: T = gout_row.iter().zip(in_row).map(|(&g, &x)| g * x).sum();
                let widx = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
                gw[widx] = gw[widx] + dot;
            }
            if let Some(gin) = gin.as_mut() {
                let wgt = kdata[((co * d.cin + ci) * d.k + ky) * d.k + kx];
                let dst = &mut gin[in_off + in_lo..in_off + in_lo + seg];
                for (g, &go) in dst.iter_mut().zip(gout_row) {
                    *g = *g + wgt * go;
                }
            }
        },
    );
}

/// 2x2 max pooling with stride 2; H and W must be even. Gradient routes to
/// the argmax cell, ties broken toward the first index in row-major order.
pub fn maxpool2x<T: Element>(x: &Tensor<T>) -> DiffResult<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return shape_err(format!("maxpool2x: expected [C,H,W], got {:?}", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DiffError::Invalid(format!(
            "maxpool2x: H and W must be even, got {}x{}",
            h, w
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::zero(); c * ho * wo];
    let mut argmax = vec![0usize; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = ci * h * w + (2 * oy) * w + 2 * ox;
                let mut best = xd[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_idx = idx;
                    }
                }
                let o = ci * ho * wo + oy * wo + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, ho, wo],
        out,
        vec![x.clone()],
        Box::new(move |gout, parents| {
            let p = &parents[0];
            if p.requires_grad() {
                let mut g = p.grad_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] = g[src] + gout[o];
                }
            }
        }),
    ))
}

/// Nearest-neighbour 2x upsampling; gradient sums the four copies back
/// into the source cell.
pub fn upsample_nearest2x<T: Element>(x: &Tensor<T>) -> DiffResult<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return shape_err(format!("upsample_nearest2x: expected [C,H,W], got {:?}", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); c * ho * wo];
    for ci in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = xd[ci * h * w + y * w + x_];
                for dy in 0..2 {
                    let row = ci * ho * wo + (2 * y + dy) * wo + 2 * x_;
                    out[row] = v;
                    out[row + 1] = v;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, ho, wo],
        out,
        vec![x.clone()],
        Box::new(move |gout, parents| {
            let p = &parents[0];
            if p.requires_grad() {
                let mut g = p.grad_mut();
                for ci in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            let mut acc = T::zero();
                            for dy in 0..2 {
                                let row = ci * ho * wo + (2 * y + dy) * wo + 2 * x_;
                                acc = acc + gout[row] + gout[row + 1];
                            }
                            let i = ci * h * w + y * w + x_;
                            g[i] = g[i] + acc;
                        }
                    }
                }
            }
        }),
    ))
}

/// Concatenate two `[C,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> DiffResult<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return shape_err(format!("concat_channels: {:?} vs {:?}", sa, sb));
    }
    let (ca, cb, h, w) = (sa[0], sb[0], sa[1], sa[2]);
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let split = ca * h * w;
    Ok(Tensor::from_op(
        vec![ca + cb, h, w],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |gout, parents| {
            let (pa, pb) = (&parents[0], &parents[1]);
            if pa.requires_grad() {
                let mut g = pa.grad_mut();
                for (gi, &go) in g.iter_mut().zip(&gout[..split]) {
                    *gi = *gi + go;
                }
            }
            if pb.requires_grad() {
                let mut g = pb.grad_mut();
                for (gi, &go) in g.iter_mut().zip(&gout[split..]) {
                    *gi = *gi + go;
                }
            }
        }),
    ))
}

/// Per-pixel channel softmax of `[K,H,W]` logits, max-stabilized.
/// Returns probabilities flat in the same layout.
fn softmax_probs<T: Element>(logits: &[T], num_classes: usize, pixels: usize) -> Vec<T> {
    let mut probs = vec![T::zero(); logits.len()];
    for i in 0..pixels {
        let mut m = logits[i];
        for k in 1..num_classes {
            let z = logits[k * pixels + i];
            if z > m {
                m = z;
            }
        }
        let mut denom = T::zero();
        for k in 0..num_classes {
            let e = (logits[k * pixels + i] - m).exp();
            probs[k * pixels + i] = e;
            denom = denom + e;
        }
        for k in 0..num_classes {
            probs[k * pixels + i] = probs[k * pixels + i] / denom;
        }
    }
    probs
}

fn validate_target<T: Element>(
    op: &'static str,
    logits: &Tensor<T>,
    target: &[u8],
) -> DiffResult<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 3 {
        return shape_err(format!("{}: logits must be [K,H,W], got {:?}", op, s));
    }
    let (k, pixels) = (s[0], s[1] * s[2]);
    if target.len() != pixels {
        return shape_err(format!(
            "{}: target has {} pixels, logits {}",
            op,
            target.len(),
            pixels
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| (t as usize) >= k) {
        return Err(DiffError::Invalid(format!(
            "{}: target class {} out of range for K={}",
            op, bad, k
        )));
    }
    Ok((k, pixels))
}

/// Mean over pixels of -log softmax probability at the target class.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    target: &[u8],
) -> DiffResult<Tensor<T>> {
    let (k, pixels) = validate_target("softmax_cross_entropy", logits, target)?;
    let z = logits.data();
    let probs = softmax_probs(z, k, pixels);
    let mut loss = T::zero();
    for i in 0..pixels {
        let p = probs[(target[i] as usize) * pixels + i];
        // p > 0 by construction of softmax
        loss = loss - p.ln();
    }
    let n = T::from_f64(pixels as f64);
    let loss = loss / n;
    check_finite("softmax_cross_entropy", &[loss])?;
    let target = target.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |gout, parents| {
            let p = &parents[0];
            if p.requires_grad() {
                let go = gout[0] / n;
                let mut g = p.grad_mut();
                for kk in 0..k {
                    for i in 0..pixels {
                        let idx = kk * pixels + i;
                        let y = if target[i] as usize == kk {
                            T::one()
                        } else {
                            T::zero()
                        };
                        g[idx] = g[idx] + go * (probs[idx] - y);
                    }
                }
            }
        }),
    ))
}

/// 1 - mean over classes present in the target of the soft Dice score on
/// softmax probabilities.
pub fn soft_dice_loss<T: Element>(logits: &Tensor<T>, target: &[u8]) -> DiffResult<Tensor<T>> {
    let (k, pixels) = validate_target("soft_dice_loss", logits, target)?;
    let probs = softmax_probs(logits.data(), k, pixels);

    let mut class_count = vec![0usize; k];
    for &t in target {
        class_count[t as usize] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| class_count[c] > 0).collect();
    // target has at least one pixel, so at least one class is present
    let mut dice_sum = T::zero();
    let mut overlap = vec![T::zero(); k]; // sum p*y per class
    let mut mass = vec![T::zero(); k]; // sum p per class
    for &c in &present {
        let row = &probs[c * pixels..(c + 1) * pixels];
        let mut ov = T::zero();
        let mut ms = T::zero();
        for (i, &p) in row.iter().enumerate() {
            ms = ms + p;
            if target[i] as usize == c {
                ov = ov + p;
            }
        }
        overlap[c] = ov;
        mass[c] = ms;
        let denom = ms + T::from_f64(class_count[c] as f64);
        dice_sum = dice_sum + (T::from_f64(2.0) * ov) / denom;
    }
    let m = T::from_f64(present.len() as f64);
    let loss = T::one() - dice_sum / m;
    check_finite("soft_dice_loss", &[loss])?;

    let target = target.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |gout, parents| {
            let parent = &parents[0];
            if !parent.requires_grad() {
                return;
            }
            // dL/dp then chain through softmax:
            // dz_k = p_k * (gp_k - sum_c gp_c p_c)
            let mut gp = vec![T::zero(); k * pixels];
            let go = gout[0];
            for &c in &present {
                let denom = mass[c] + T::from_f64(class_count[c] as f64);
                let denom2 = denom * denom;
                let two = T::from_f64(2.0);
                for i in 0..pixels {
                    let y = if target[i] as usize == c {
                        T::one()
                    } else {
                        T::zero()
                    };
                    // d(2*ov/denom)/dp_ci = (2y*denom - 2*ov)/denom^2
                    let dd = (two * y * denom - two * overlap[c]) / denom2;
                    gp[c * pixels + i] = -go * dd / m;
                }
            }
            let mut g = parent.grad_mut();
            for i in 0..pixels {
                let mut dot = T::zero();
                for kk in 0..k {
                    let idx = kk * pixels + i;
                    dot = dot + gp[idx] * probs[idx];
                }
                for kk in 0..k {
                    let idx = kk * pixels + i;
                    g[idx] = g[idx] + probs[idx] * (gp[idx] - dot);
                }
            }
        }),
    ))
}

/// Mean over spatial locations of the cosine distance between the two
/// channel vectors; the shared core of `cosine_distance` and
/// `consistency_loss`. Shape is interpreted as `[C, ...spatial]`.
fn cosine_mean<T: Element>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> DiffResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("cosine: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.shape().is_empty() || a.numel() == 0 {
        return Err(DiffError::Invalid("cosine: empty tensor".into()));
    }
    if eps <= 0.0 {
        return Err(DiffError::Invalid(format!("cosine: eps {} must be > 0", eps)));
    }
    let channels = a.shape()[0];
    let locs = a.numel() / channels;
    let eps_t = T::from_f64(eps);
    let ad = a.data();
    let bd = b.data();

    let mut total = T::zero();
    for i in 0..locs {
        let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
        for c in 0..channels {
            let x = ad[c * locs + i];
            let y = bd[c * locs + i];
            dot = dot + x * y;
            na2 = na2 + x * x;
            nb2 = nb2 + y * y;
        }
        let na = na2.sqrt().max(eps_t);
        let nb = nb2.sqrt().max(eps_t);
        let s = (dot / (na * nb)).min(T::one()).max(-T::one());
        total = total + (T::one() - s);
    }
    let loss = total / T::from_f64(locs as f64);
    check_finite("cosine", &[loss])?;

    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![a.clone(), b.clone()],
        Box::new(move |gout, parents| {
            let (pa, pb) = (&parents[0], &parents[1]);
            if !pa.requires_grad() && !pb.requires_grad() {
                return;
            }
            let ad = pa.data();
            let bd = pb.data();
            let coef = gout[0] / T::from_f64(locs as f64);
            let mut ga = if pa.requires_grad() {
                Some(pa.grad_mut())
            } else {
                None
            };
            let mut gb = if pb.requires_grad() {
                Some(pb.grad_mut())
            } else {
                None
            };
            for i in 0..locs {
                let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
                for c in 0..channels {
                    let x = ad[c * locs + i];
                    let y = bd[c * locs + i];
                    dot = dot + x * y;
                    na2 = na2 + x * x;
                    nb2 = nb2 + y * y;
                }
                let na_raw = na2.sqrt();
                let nb_raw = nb2.sqrt();
                let na = na_raw.max(eps_t);
                let nb = nb_raw.max(eps_t);
                let s = dot / (na * nb);
                for c in 0..channels {
                    let x = ad[c * locs + i];
                    let y = bd[c * locs + i];
                    if let Some(ga) = ga.as_mut() {
                        // dD/dx = -(y/(na*nb) - [na>eps] * s*x/na^2)
                        let norm_term = if na_raw > eps_t { s * x / (na * na) } else { T::zero() };
                        ga[c * locs + i] = ga[c * locs + i] + coef * (norm_term - y / (na * nb));
                    }
                    if let Some(gb) = gb.as_mut() {
                        let norm_term = if nb_raw > eps_t { s * y / (nb * nb) } else { T::zero() };
                        gb[c * locs + i] = gb[c * locs + i] + coef * (norm_term - x / (na * nb));
                    }
                }
            }
        }),
    ))
}

/// Cosine distance 1 - <a,b>/(max(|a|,eps) * max(|b|,eps)) between two
/// vectors; result in [0, 2].
pub fn cosine_distance<T: Element>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> DiffResult<Tensor<T>> {
    if a.shape().len() != 1 {
        return shape_err(format!("cosine_distance: expected [C], got {:?}", a.shape()));
    }
    cosine_mean(a, b, eps)
}

/// Mean over spatial locations of the per-location channel cosine
/// distance between two `[C,h,w]` feature maps; result in [0, 2].
pub fn consistency_loss<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    eps: f64,
) -> DiffResult<Tensor<T>> {
    if a.shape().len() != 3 {
        return shape_err(format!("consistency_loss: expected [C,h,w], got {:?}", a.shape()));
    }
    cosine_mean(a, b, eps)
}

/// Sum of every element, as a scalar.
pub fn sum<T: Element>(x: &Tensor<T>) -> DiffResult<Tensor<T>> {
    let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
    check_finite("sum", &[total])?;
    Ok(Tensor::from_op(
        vec![],
        vec![total],
        vec![x.clone()],
        Box::new(|gout, parents| {
            let p = &parents[0];
            if p.requires_grad() {
                let go = gout[0];
                let mut g = p.grad_mut();
                for gi in g.iter_mut() {
                    *gi = *gi + go;
                }
            }
        }),
    ))
}
