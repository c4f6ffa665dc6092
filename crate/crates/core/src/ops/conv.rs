//! Direct 2-D convolution with zero padding.
//!
//! Every output element is accumulated as `bias[o]` followed by the products
//! over `(c, i, j)` in lexicographic order. The masked variant runs the same
//! kernel over a contiguous copy of the selected kernel rows, so it agrees
//! bit-for-bit with the full convolution on the channels it computes.

use crate::error::{Error, Result};
use crate::mask::ChannelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent along one axis, `(len + 2·pad − k)/stride + 1`.
pub fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::NonIntegralOutput {
            op: "conv2d",
            detail: format!("kernel {k} larger than padded input {padded}"),
        });
    }
    if (padded - k) % stride != 0 {
        return Err(Error::NonIntegralOutput {
            op: "conv2d",
            detail: format!("({len} + 2·{pad} − {k}) is not divisible by stride {stride}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4(op)?;
        let (cout, kcin, kh, kw) = kernel.dims4(op)?;
        if kcin != cin {
            return Err(Error::shape(
                op,
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(
                "stride",
                format!("{stride} not in {{1, 2}}"),
            ));
        }
        let ho = conv_output_len(h, kh, stride, pad)?;
        let wo = conv_output_len(w, kw, stride, pad)?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }
}

/// Output columns computed per accumulator block.
const CHUNK: usize = 16;

/// Copies `planes` planes of `h × w` into zeroed `hp × wp` planes, pixel
/// `(y, x)` landing at `(top + y·dilate, left + x·dilate)`.
#[allow(clippy::too_many_arguments)]
fn pad_planes<T: Scalar>(
    src: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (top, left): (usize, usize),
    dilate: usize,
    (hp, wp): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        for y in 0..h {
            let srow = &src[(p * h + y) * w..(p * h + y + 1) * w];
            let base = p * hp * wp + (top + y * dilate) * wp + left;
            if dilate == 1 {
                out[base..base + w].copy_from_slice(srow);
            } else {
                for (x, &v) in srow.iter().enumerate() {
                    out[base + x * dilate] = v;
                }
            }
        }
    }
    out
}

/// Valid correlation over already padded planes.
#[derive(Clone, Copy, Debug)]
struct Corr {
    cin: usize,
    hp: usize,
    wp: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl Corr {
    /// Padded row length that lets every block read `CHUNK` columns.
    fn row_len(wo: usize, kw: usize, stride: usize, min: usize) -> usize {
        let blocks = wo.div_ceil(CHUNK);
        min.max((blocks * CHUNK - 1) * stride + kw)
    }
}

/// Output channels computed together, sharing each input load.
const OUT_BLOCK: usize = 4;

/// Kernel regrouped as `[block][c][i][j][OUT_BLOCK]`, zero rows past `cout`.
fn block_kernel<T: Scalar>(kernel: &[T], cout: usize, per_row: usize) -> Vec<T> {
    let blocks = cout.div_ceil(OUT_BLOCK);
    let mut out = vec![T::zero(); blocks * per_row * OUT_BLOCK];
    for o in 0..cout {
        let (blk, lane) = (o / OUT_BLOCK, o % OUT_BLOCK);
        for (t, &w) in kernel[o * per_row..(o + 1) * per_row].iter().enumerate() {
            out[(blk * per_row + t) * OUT_BLOCK + lane] = w;
        }
    }
    out
}

/// `acc[r][t] += w[r] · seg[t]`, unfused.
#[inline(always)]
fn fma_block<T: Scalar>(acc: &mut [[T; CHUNK]; OUT_BLOCK], w: &[T; OUT_BLOCK], seg: &[T; CHUNK]) {
    for r in 0..OUT_BLOCK {
        let wr = w[r];
        for t in 0..CHUNK {
            acc[r][t] += wr * seg[t];
        }
    }
}

#[inline(always)]
fn corr_body<T: Scalar>(src: &[T], kernel: &[T], bias: Option<&[T]>, g: &Corr, out: &mut [T]) {
    let plane_in = g.hp * g.wp;
    let plane_out = g.ho * g.wo;
    let ksz = g.kh * g.kw;
    let per_row = g.cin * ksz;
    let blocked = block_kernel(kernel, g.cout, per_row);
    for y in 0..g.ho {
        for x0 in (0..g.wo).step_by(CHUNK) {
            let len = CHUNK.min(g.wo - x0);
            for blk in 0..g.cout.div_ceil(OUT_BLOCK) {
                let taps = &blocked[blk * per_row * OUT_BLOCK..(blk + 1) * per_row * OUT_BLOCK];
                let mut acc = [[T::zero(); CHUNK]; OUT_BLOCK];
                if let Some(b) = bias {
                    for (r, a) in acc.iter_mut().enumerate() {
                        let o = blk * OUT_BLOCK + r;
                        if o < g.cout {
                            *a = [b[o]; CHUNK];
                        }
                    }
                }
                for c in 0..g.cin {
                    for i in 0..g.kh {
                        let row_start = c * plane_in + (y * g.stride + i) * g.wp;
                        let row = &src[row_start..row_start + g.wp];
                        for j in 0..g.kw {
                            let t0 = ((c * g.kh + i) * g.kw + j) * OUT_BLOCK;
                            let w: &[T; OUT_BLOCK] =
                                taps[t0..t0 + OUT_BLOCK].try_into().expect("tap block");
                            let first = x0 * g.stride + j;
                            if g.stride == 1 {
                                let seg: &[T; CHUNK] =
                                    row[first..first + CHUNK].try_into().expect("padded row");
                                fma_block(&mut acc, w, seg);
                            } else {
                                let seg: [T; CHUNK] =
                                    std::array::from_fn(|t| row[first + t * g.stride]);
                                fma_block(&mut acc, w, &seg);
                            }
                        }
                    }
                }
                for (r, a) in acc.iter().enumerate() {
                    let o = blk * OUT_BLOCK + r;
                    if o < g.cout {
                        let dst = o * plane_out + y * g.wo + x0;
                        out[dst..dst + len].copy_from_slice(&a[..len]);
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn corr_avx2<T: Scalar>(
    src: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &Corr,
    out: &mut [T],
) {
    corr_body(src, kernel, bias, g, out)
}

/// Runs [`corr_body`], compiled for AVX2 when the CPU has it. No fused
/// multiply-add is used, so both builds round identically.
fn corr<T: Scalar>(src: &[T], kernel: &[T], bias: Option<&[T]>, g: &Corr, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required target feature was detected at runtime.
        return unsafe { corr_avx2(src, kernel, bias, g, out) };
    }
    corr_body(src, kernel, bias, g, out)
}

/// Writes the convolution of every batch item into `out`
/// (`n × cout × ho × wo`).
pub(crate) fn conv_forward_raw<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out: &mut [T],
) {
    let hp = g.h + 2 * g.pad;
    let wp = Corr::row_len(g.wo, g.kw, g.stride, g.w + 2 * g.pad);
    let corr_g = Corr {
        cin: g.cin,
        hp,
        wp,
        cout: g.cout,
        kh: g.kh,
        kw: g.kw,
        ho: g.ho,
        wo: g.wo,
        stride: g.stride,
    };
    let item_in = g.cin * g.h * g.w;
    let item_out = g.cout * g.ho * g.wo;
    for b in 0..g.n {
        let padded = pad_planes(
            &input[b * item_in..(b + 1) * item_in],
            g.cin,
            (g.h, g.w),
            (g.pad, g.pad),
            1,
            (hp, wp),
        );
        corr(
            &padded,
            kernel,
            bias,
            &corr_g,
            &mut out[b * item_out..(b + 1) * item_out],
        );
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Standard convolution: `input[N,Cin,H,W] ⋆ kernel[Cout,Cin,kh,kw] (+ bias)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new("conv2d", input, kernel, stride, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    conv_forward_raw(
        input.data(),
        kernel.data(),
        bias.map(Tensor::data),
        &g,
        out.data_mut(),
    );
    Ok(out)
}

/// Computes only the output channels selected by `mask`.
///
/// The selected kernel rows (and bias entries) are first copied into a
/// contiguous buffer. Output has `mask.count()` channels.
pub fn conv2d_masked<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mask: &ChannelMask,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let cout = kernel.shape().first().copied().unwrap_or(0);
    if mask.total() != cout {
        return Err(Error::shape(
            "conv2d_masked",
            format!("mask over {} channels, kernel has {cout}", mask.total()),
        ));
    }
    check_bias("conv2d_masked", bias, cout)?;
    let rows = kernel.slice_outer(mask.start(), mask.end())?;
    let bias_rows = bias
        .map(|b| b.slice_outer(mask.start(), mask.end()))
        .transpose()?;
    conv2d(input, &rows, bias_rows.as_ref(), stride, padding)
}

/// Gradients of [`conv2d`] for a cotangent `grad_out`.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new("conv2d_backward", input, kernel, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?}, forward output is {:?}",
                grad_out.shape(),
                [g.n, g.cout, g.ho, g.wo]
            ),
        ));
    }
    let plane_out = g.ho * g.wo;
    let go = grad_out.data();
    let mut grad_bias = vec![T::zero(); g.cout];
    for b in 0..g.n {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            let start = (b * g.cout + o) * plane_out;
            *gb += go[start..start + plane_out].iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().to_vec(), grad_input(go, kernel.data(), &g))?,
        kernel: Tensor::from_vec(kernel.shape().to_vec(), grad_kernel(go, input.data(), &g))?,
        bias: Tensor::from_vec(vec![g.cout], grad_bias)?,
    })
}

/// Full correlation of the dilated output gradient with the flipped,
/// transposed kernel, cropped back to the input extent.
fn grad_input<T: Scalar>(go: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let ksz = g.kh * g.kw;
    let mut flipped = vec![T::zero(); kernel.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for t in 0..ksz {
                flipped[(c * g.cout + o) * ksz + (ksz - 1 - t)] = kernel[(o * g.cin + c) * ksz + t];
            }
        }
    }
    let (hf, wf) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let hp = (g.ho - 1) * g.stride + 1 + 2 * (g.kh - 1);
    let wp = Corr::row_len(wf, g.kw, 1, (g.wo - 1) * g.stride + 1 + 2 * (g.kw - 1));
    let corr_g = Corr {
        cin: g.cout,
        hp,
        wp,
        cout: g.cin,
        kh: g.kh,
        kw: g.kw,
        ho: hf,
        wo: wf,
        stride: 1,
    };
    let item_out = g.cout * g.ho * g.wo;
    let mut full = vec![T::zero(); g.cin * hf * wf];
    let mut out = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for b in 0..g.n {
        let padded = pad_planes(
            &go[b * item_out..(b + 1) * item_out],
            g.cout,
            (g.ho, g.wo),
            (g.kh - 1, g.kw - 1),
            g.stride,
            (hp, wp),
        );
        corr(&padded, &flipped, None, &corr_g, &mut full);
        for c in 0..g.cin {
            for y in 0..g.h {
                let src = (c * hf + y + g.pad) * wf + g.pad;
                let dst = ((b * g.cin + c) * g.h + y) * g.w;
                out[dst..dst + g.w].copy_from_slice(&full[src..src + g.w]);
            }
        }
    }
    out
}

/// Kernel gradient as `Gᵀ`-weighted sums of input patches: for every output
/// pixel `p`, `gk[o][q] += go[o][p] · patch[p][q]` with `q = (c, i, j)`.
#[inline(always)]
fn grad_kernel_body<T: Scalar>(
    go: &[T],
    padded: &[T],
    g: &ConvGeometry,
    hp: usize,
    wp: usize,
    gk: &mut [T],
) {
    let plane_out = g.ho * g.wo;
    let q_len = g.cin * g.kh * g.kw;
    let q_pad = q_len.div_ceil(CHUNK) * CHUNK;
    let o_pad = g.cout.div_ceil(OUT_BLOCK) * OUT_BLOCK;

    let mut patches = vec![T::zero(); plane_out * q_pad];
    for y in 0..g.ho {
        for x in 0..g.wo {
            let row = &mut patches[(y * g.wo + x) * q_pad..];
            let mut q = 0;
            for c in 0..g.cin {
                for i in 0..g.kh {
                    let src = c * hp * wp + (y * g.stride + i) * wp + x * g.stride;
                    row[q..q + g.kw].copy_from_slice(&padded[src..src + g.kw]);
                    q += g.kw;
                }
            }
        }
    }
    let mut go_t = vec![T::zero(); plane_out * o_pad];
    for o in 0..g.cout {
        for p in 0..plane_out {
            go_t[p * o_pad + o] = go[o * plane_out + p];
        }
    }

    for o0 in (0..o_pad).step_by(OUT_BLOCK) {
        for q0 in (0..q_pad).step_by(CHUNK) {
            let mut acc = [[T::zero(); CHUNK]; OUT_BLOCK];
            for p in 0..plane_out {
                let w: &[T; OUT_BLOCK] = go_t[p * o_pad + o0..p * o_pad + o0 + OUT_BLOCK]
                    .try_into()
                    .expect("out block");
                let seg: &[T; CHUNK] = patches[p * q_pad + q0..p * q_pad + q0 + CHUNK]
                    .try_into()
                    .expect("patch block");
                fma_block(&mut acc, w, seg);
            }
            for (r, a) in acc.iter().enumerate() {
                let o = o0 + r;
                if o >= g.cout {
                    break;
                }
                let n = CHUNK.min(q_len.saturating_sub(q0));
                for (dst, &v) in gk[o * q_len + q0..o * q_len + q0 + n].iter_mut().zip(a) {
                    *dst += v;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn grad_kernel_avx2<T: Scalar>(
    go: &[T],
    padded: &[T],
    g: &ConvGeometry,
    hp: usize,
    wp: usize,
    gk: &mut [T],
) {
    grad_kernel_body(go, padded, g, hp, wp, gk)
}

fn grad_kernel<T: Scalar>(go: &[T], input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let item_in = g.cin * g.h * g.w;
    let item_out = g.cout * g.ho * g.wo;
    let mut gk = vec![T::zero(); g.cout * g.cin * g.kh * g.kw];
    for b in 0..g.n {
        let padded = pad_planes(
            &input[b * item_in..(b + 1) * item_in],
            g.cin,
            (g.h, g.w),
            (g.pad, g.pad),
            1,
            (hp, wp),
        );
        let go_b = &go[b * item_out..(b + 1) * item_out];
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required target feature was detected at runtime.
            unsafe { grad_kernel_avx2(go_b, &padded, g, hp, wp, &mut gk) };
            continue;
        }
        grad_kernel_body(go_b, &padded, g, hp, wp, &mut gk);
    }
    gk
}
