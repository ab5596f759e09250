//! Forward kernels and their adjoints.
//!
//! All spatial tensors are `C x H x W`. Each public function validates its
//! shapes and rejects non-finite outputs; the `*_backward` helpers are used
//! by the tape and assume shapes were already validated on the way forward.

use super::{shape_err, EngineError, Result, Scalar, Tensor};

/// Interpolation used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    Nearest,
    /// Mean over each `f x f` block; requires integer downscale factors.
    AverageArea,
    /// Bilinear, half-pixel centers (`align_corners = false`).
    Bilinear,
}

impl std::str::FromStr for ResampleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "area" | "average-area" => Ok(Self::AverageArea),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown resample mode {other:?}")),
        }
    }
}

/// Mirror index without repeating the edge sample: `-1 -> 1`, `len -> len - 2`.
#[inline]
pub fn reflect(i: isize, len: usize) -> usize {
    let l = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= l {
        2 * l - 2 - i
    } else {
        i
    };
    debug_assert!((0..l).contains(&r), "reflect({i}, {len}) out of range");
    r as usize
}

fn check_spatial(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(EngineError::Invalid { op, detail: format!("reflect padding needs H, W >= 2, got {h}x{w}") });
    }
    Ok(())
}

/// Unfolds a reflect-padded 3x3 neighbourhood into a `(9C) x (H W)` matrix.
/// Row `c * 9 + dy * 3 + dx` holds `input[c, y + dy - 1, x + dx - 1]`.
pub(crate) fn im2col_reflect<S: Scalar>(data: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let hw = h * w;
    let mut cols = vec![S::zero(); 9 * c * hw];
    for ch in 0..c {
        let plane = &data[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            for y in 0..h {
                let sy = reflect(y as isize + dy as isize - 1, h);
                let src = &plane[sy * w..(sy + 1) * w];
                for dx in 0..3 {
                    let row = ch * 9 + dy * 3 + dx;
                    let dst = &mut cols[row * hw + y * w..row * hw + (y + 1) * w];
                    match dx {
                        0 => {
                            dst[0] = src[1];
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = src[w - 2];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_reflect`]: scatters column gradients back onto the input.
pub(crate) fn col2im_reflect<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let hw = h * w;
    let mut out = vec![S::zero(); c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            for y in 0..h {
                let sy = reflect(y as isize + dy as isize - 1, h);
                for dx in 0..3 {
                    let row = ch * 9 + dy * 3 + dx;
                    let src = &cols[row * hw + y * w..row * hw + (y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    match dx {
                        0 => {
                            dst[1] += src[0];
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                            dst[w - 2] += src[w - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S], hw: usize) {
    for (plane, &b) in out.chunks_mut(hw).zip(bias) {
        if b != S::zero() {
            for v in plane {
                *v += b;
            }
        }
    }
}

/// Reflect-padded 3x3 convolution: `K x C x 3 x 3` weights, `K` biases.
pub fn conv3x3_reflect<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = input.chw()?;
    let k = conv_out_channels(c, weight, bias)?;
    check_spatial("conv3x3_reflect", h, w)?;
    let hw = h * w;
    let cols = im2col_reflect(input.data(), c, h, w);
    let mut out = vec![S::zero(); k * hw];
    S::gemm(
        k,
        9 * c,
        hw,
        S::one(),
        weight.data(),
        (9 * c) as isize,
        1,
        &cols,
        hw as isize,
        1,
        S::zero(),
        &mut out,
        hw as isize,
        1,
    );
    add_bias(&mut out, bias.data(), hw);
    Tensor::from_vec(&[k, h, w], out)?.ensure_finite("conv3x3_reflect")
}

fn conv_out_channels<S: Scalar>(c: usize, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<usize> {
    match *weight.shape() {
        [k, wc, 3, 3] if wc == c => {
            if bias.shape() != [k] {
                return shape_err("conv3x3_reflect", format!("bias shape {:?}, expected [{k}]", bias.shape()));
            }
            Ok(k)
        }
        _ => shape_err("conv3x3_reflect", format!("weight shape {:?} for {c} input channels", weight.shape())),
    }
}

/// Gradients of [`conv3x3_reflect`] w.r.t. input, weight and bias.
pub(crate) fn conv3x3_reflect_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
    need_input: bool,
) -> (Option<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let (c, h, w) = input.chw().expect("validated on forward");
    let k = weight.shape()[0];
    let hw = h * w;
    let cols = im2col_reflect(input.data(), c, h, w);

    let mut d_weight = vec![S::zero(); k * 9 * c];
    S::gemm(
        k,
        hw,
        9 * c,
        S::one(),
        grad_out,
        hw as isize,
        1,
        &cols,
        1,
        hw as isize,
        S::zero(),
        &mut d_weight,
        (9 * c) as isize,
        1,
    );

    let d_input = need_input.then(|| {
        let mut d_cols = cols;
        S::gemm(
            9 * c,
            k,
            hw,
            S::one(),
            weight.data(),
            1,
            (9 * c) as isize,
            grad_out,
            hw as isize,
            1,
            S::zero(),
            &mut d_cols,
            hw as isize,
            1,
        );
        Tensor::from_vec(&[c, h, w], col2im_reflect(&d_cols, c, h, w)).expect("shape")
    });
    let d_bias: Vec<S> = grad_out.chunks(hw).map(|p| p.iter().copied().sum()).collect();

    (
        d_input,
        Tensor::from_vec(weight.shape(), d_weight).expect("shape"),
        Tensor::from_vec(&[k], d_bias).expect("shape"),
    )
}

/// Per-cell dense layer (a 1x1 convolution): `M x C` weights, optional `M` bias.
pub fn dense_per_cell<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let (c, h, w) = input.chw()?;
    let m = match *weight.shape() {
        [m, wc] if wc == c => m,
        _ => return shape_err("dense_per_cell", format!("weight shape {:?} for {c} input channels", weight.shape())),
    };
    if let Some(b) = bias {
        if b.shape() != [m] {
            return shape_err("dense_per_cell", format!("bias shape {:?}", b.shape()));
        }
    }
    let hw = h * w;
    let mut out = vec![S::zero(); m * hw];
    S::gemm(
        m,
        c,
        hw,
        S::one(),
        weight.data(),
        c as isize,
        1,
        input.data(),
        hw as isize,
        1,
        S::zero(),
        &mut out,
        hw as isize,
        1,
    );
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), hw);
    }
    Tensor::from_vec(&[m, h, w], out)?.ensure_finite("dense_per_cell")
}

/// Gradients of [`dense_per_cell`] w.r.t. input, weight and (if present) bias.
pub(crate) fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
    with_bias: bool,
    need_input: bool,
) -> (Option<Tensor<S>>, Tensor<S>, Option<Tensor<S>>) {
    let (c, h, w) = input.chw().expect("validated on forward");
    let m = weight.shape()[0];
    let hw = h * w;
    let mut d_weight = vec![S::zero(); m * c];
    S::gemm(
        m,
        hw,
        c,
        S::one(),
        grad_out,
        hw as isize,
        1,
        input.data(),
        1,
        hw as isize,
        S::zero(),
        &mut d_weight,
        c as isize,
        1,
    );
    let d_input = need_input.then(|| {
        let mut d_input = vec![S::zero(); c * hw];
        S::gemm(
            c,
            m,
            hw,
            S::one(),
            weight.data(),
            1,
            c as isize,
            grad_out,
            hw as isize,
            1,
            S::zero(),
            &mut d_input,
            hw as isize,
            1,
        );
        Tensor::from_vec(&[c, h, w], d_input).expect("shape")
    });
    let d_bias = with_bias.then(|| {
        let v: Vec<S> = grad_out.chunks(hw).map(|p| p.iter().copied().sum()).collect();
        Tensor::from_vec(&[m], v).expect("shape")
    });
    (d_input, Tensor::from_vec(&[m, c], d_weight).expect("shape"), d_bias)
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    input.map(|v| if v < S::zero() { S::zero() } else { v }).ensure_finite("relu")
}

/// Stacks `C_i x H x W` tensors along the channel axis in argument order.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = parts.first() else {
        return shape_err("concat_channels", "no inputs");
    };
    let (_, h, w) = first.chw()?;
    let mut total = 0;
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return shape_err("concat_channels", format!("{ph}x{pw} vs {h}x{w}"));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[total, h, w], data)?.ensure_finite("concat_channels")
}

/// One output sample along an axis as a list of `(source index, weight)` taps.
pub(crate) type AxisTaps = Vec<Vec<(usize, f64)>>;

pub(crate) fn axis_taps(input: usize, output: usize, mode: ResampleMode) -> Result<AxisTaps> {
    if output == 0 || input == 0 {
        return Err(EngineError::Invalid { op: "resample", detail: format!("cannot resample {input} -> {output}") });
    }
    let scale = input as f64 / output as f64;
    Ok(match mode {
        ResampleMode::Nearest => (0..output)
            .map(|o| {
                let src = (((o as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                vec![(src, 1.0)]
            })
            .collect(),
        ResampleMode::AverageArea => {
            if !input.is_multiple_of(output) {
                return Err(EngineError::Invalid {
                    op: "resample",
                    detail: format!("average-area needs an integer factor, got {input} -> {output}"),
                });
            }
            let f = input / output;
            let wgt = 1.0 / f as f64;
            (0..output).map(|o| (o * f..(o + 1) * f).map(|i| (i, wgt)).collect()).collect()
        }
        ResampleMode::Bilinear => (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect(),
    })
}

/// Separable linear resampling with explicit taps per axis.
pub(crate) fn resample_taps<S: Scalar>(input: &Tensor<S>, rows: &AxisTaps, cols: &AxisTaps) -> Result<Tensor<S>> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![S::zero(); c * oh * ow];
    let mut row_buf = vec![S::zero(); w];
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (y, ytaps) in rows.iter().enumerate() {
            row_buf.iter_mut().for_each(|v| *v = S::zero());
            for &(sy, wy) in ytaps {
                let wy = S::from_f64(wy);
                for (b, &v) in row_buf.iter_mut().zip(&plane[sy * w..(sy + 1) * w]) {
                    *b += wy * v;
                }
            }
            for (x, xtaps) in cols.iter().enumerate() {
                let mut acc = S::zero();
                for &(sx, wx) in xtaps {
                    acc += S::from_f64(wx) * row_buf[sx];
                }
                dst[y * ow + x] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)?.ensure_finite("resample")
}

/// Adjoint of [`resample_taps`].
pub(crate) fn resample_taps_backward<S: Scalar>(
    grad_out: &[S],
    c: usize,
    h: usize,
    w: usize,
    rows: &AxisTaps,
    cols: &AxisTaps,
) -> Tensor<S> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut d_in = vec![S::zero(); c * h * w];
    let mut row_buf = vec![S::zero(); w];
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let plane = &mut d_in[ch * h * w..(ch + 1) * h * w];
        for (y, ytaps) in rows.iter().enumerate() {
            row_buf.iter_mut().for_each(|v| *v = S::zero());
            for (x, xtaps) in cols.iter().enumerate() {
                let gv = g[y * ow + x];
                for &(sx, wx) in xtaps {
                    row_buf[sx] += S::from_f64(wx) * gv;
                }
            }
            for &(sy, wy) in ytaps {
                let wy = S::from_f64(wy);
                for (d, &b) in plane[sy * w..(sy + 1) * w].iter_mut().zip(&row_buf) {
                    *d += wy * b;
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], d_in).expect("shape")
}

/// Resamples every channel to `out_h x out_w`.
pub fn resample<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Tensor<S>> {
    let (_, h, w) = input.chw()?;
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let rows = axis_taps(h, out_h, mode)?;
    let cols = axis_taps(w, out_w, mode)?;
    resample_taps(input, &rows, &cols)
}

/// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of every channel.
pub fn crop<S: Scalar>(input: &Tensor<S>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let (c, ih, iw) = input.chw()?;
    if y0 + h > ih || x0 + w > iw || h == 0 || w == 0 {
        return shape_err("crop", format!("window {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &input.data()[ch * ih * iw..(ch + 1) * ih * iw];
        for y in y0..y0 + h {
            data.extend_from_slice(&plane[y * iw + x0..y * iw + x0 + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Reflect-pads every channel by `bottom` rows and `right` columns.
pub fn pad_reflect<S: Scalar>(input: &Tensor<S>, bottom: usize, right: usize) -> Result<Tensor<S>> {
    let (c, h, w) = input.chw()?;
    if bottom >= h || right >= w {
        return shape_err("pad_reflect", format!("pad ({bottom},{right}) on {h}x{w}"));
    }
    let (oh, ow) = (h + bottom, w + right);
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let sy = reflect(y as isize, h);
            for x in 0..ow {
                data.push(plane[sy * w + reflect(x as isize, w)]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], data)
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(sigmoid_scalar)
}
