//! Direct convolution and the explicit im2col + GEMM pipeline.
//!
//! Padding is virtual everywhere: reads outside the input return zero and no
//! padded copy of the input is ever made.

use crate::error::{ConvError, Result};
use crate::gemm::{gemm, zero_matrix, BlockingParams};
use crate::team::Team;
use crate::tensor::{
    filters_as_matrix, gemm_dims, output_as_matrix, output_dims, try_alloc, ConvParams, Element, MatMut, MatRef,
    Matrix, Tensor4,
};

pub(crate) fn check_operands<T>(f: &Tensor4<T>, i: &Tensor4<T>, cp: &ConvParams) -> Result<()> {
    cp.validate()?;
    if f.dims() != cp.filter_dims() {
        return Err(ConvError::DimensionMismatch(format!(
            "filters are {:?}, geometry expects {:?}",
            f.dims(),
            cp.filter_dims()
        )));
    }
    if i.dims() != cp.input_dims() {
        return Err(ConvError::DimensionMismatch(format!(
            "input is {:?}, geometry expects {:?}",
            i.dims(),
            cp.input_dims()
        )));
    }
    Ok(())
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got < want {
        return Err(ConvError::DimensionMismatch(format!(
            "{what} buffer holds {got} elements, needs {want}"
        )));
    }
    Ok(())
}

/// Reference seven-loop convolution.
pub fn conv_direct<T: Element>(f: &Tensor4<T>, i: &Tensor4<T>, cp: &ConvParams) -> Result<Tensor4<T>> {
    check_operands(f, i, cp)?;
    let mut o = Tensor4::try_zeros(cp.output_tensor_dims()?)?;
    conv_direct_into(f.data(), i.data(), cp, o.data_mut())?;
    Ok(o)
}

/// [`conv_direct`] on raw leftmost-fastest buffers. `out` is overwritten.
pub fn conv_direct_into<T: Element>(f: &[T], input: &[T], cp: &ConvParams, out: &mut [T]) -> Result<()> {
    let (h_o, w_o) = output_dims(cp)?;
    let ConvParams {
        k_n,
        k_h,
        k_w,
        c_i,
        h_i,
        w_i,
        b,
        s,
        p,
    } = *cp;
    check_len("filter", f.len(), k_n * k_h * k_w * c_i)?;
    check_len("input", input.len(), h_i * w_i * c_i * b)?;
    check_len("output", out.len(), k_n * h_o * w_o * b)?;
    let out = &mut out[..k_n * h_o * w_o * b];
    out.fill(T::ZERO);

    let (s, p) = (s as isize, p as isize);
    for ib in 0..b {
        for ic in 0..c_i {
            let in_plane = (ic + ib * c_i) * h_i * w_i;
            for iw in 0..w_o {
                for ih in 0..h_o {
                    let o_base = k_n * (ih + h_o * (iw + w_o * ib));
                    for ikw in 0..k_w {
                        let y = iw as isize * s + ikw as isize - p;
                        if y < 0 || y >= w_i as isize {
                            continue;
                        }
                        for ikh in 0..k_h {
                            let x = ih as isize * s + ikh as isize - p;
                            if x < 0 || x >= h_i as isize {
                                continue;
                            }
                            let v = input[in_plane + x as usize + y as usize * h_i];
                            let f_base = k_n * (ikh + k_h * (ikw + k_w * ic));
                            let (dst, filt) = (&mut out[o_base..o_base + k_n], &f[f_base..f_base + k_n]);
                            for (o, &fv) in dst.iter_mut().zip(filt) {
                                *o += fv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Bytes of the f32 matrix B̂ the explicit im2col path allocates:
/// `(k_h·k_w·c_i) · (h_o·w_o·b) · 4`.
pub fn im2col_workspace_bytes(cp: &ConvParams) -> Result<u64> {
    let d = gemm_dims(cp)?;
    Ok(d.k as u64 * d.n as u64 * std::mem::size_of::<f32>() as u64)
}

/// Unrolls `i` into the `(k_h·k_w·c_i) × (h_o·w_o·b)` matrix B̂.
///
/// Row `r = i_kh + i_kw·k_h + i_c·k_w·k_h`, column `c = i_h + i_w·h_o + i_b·w_o·h_o`.
pub fn im2col<T: Element>(i: &Tensor4<T>, cp: &ConvParams, threads: usize) -> Result<Matrix<T>> {
    cp.validate()?;
    if i.dims() != cp.input_dims() {
        return Err(ConvError::DimensionMismatch(format!(
            "input is {:?}, geometry expects {:?}",
            i.dims(),
            cp.input_dims()
        )));
    }
    let d = gemm_dims(cp)?;
    let mut bhat = Matrix::try_zeros(d.k, d.n)?;
    im2col_into(i.data(), cp, bhat.data_mut(), threads)?;
    Ok(bhat)
}

struct SharedOut<T>(*mut T);

// Safety: workers write disjoint element sets (see im2col_into).
unsafe impl<T: Send> Sync for SharedOut<T> {}

/// [`im2col`] into a caller-owned column-major buffer with `ld = k`.
///
/// For each image, the channel loop is split across `threads` workers. A
/// channel owns the `k_h·k_w` consecutive rows starting at `i_c·k_h·k_w` in
/// every column, so workers never touch the same element.
pub fn im2col_into<T: Element>(input: &[T], cp: &ConvParams, out: &mut [T], threads: usize) -> Result<()> {
    let (h_o, w_o) = output_dims(cp)?;
    let ConvParams {
        k_h,
        k_w,
        c_i,
        h_i,
        w_i,
        b,
        s,
        p,
        ..
    } = *cp;
    let k = k_h * k_w * c_i;
    check_len("input", input.len(), h_i * w_i * c_i * b)?;
    check_len("im2col", out.len(), k * h_o * w_o * b)?;

    let team = Team::new(threads);
    let dst = SharedOut(out.as_mut_ptr());
    let dst = &dst;
    let (s, p) = (s as isize, p as isize);
    let patch = k_h * k_w;
    for ib in 0..b {
        team.for_each_range(c_i, |channels| {
            for ic in channels {
                let in_plane = &input[(ic + ib * c_i) * h_i * w_i..][..h_i * w_i];
                let mut col = ib * w_o * h_o;
                for iw in 0..w_o {
                    let y0 = iw as isize * s - p;
                    for ih in 0..h_o {
                        let x0 = ih as isize * s - p;
                        // Safety: rows ic·patch .. (ic+1)·patch of column `col`
                        // belong to this worker alone, and col < h_o·w_o·b so the
                        // range lies inside `out` (checked above).
                        let cell = unsafe { std::slice::from_raw_parts_mut(dst.0.add(col * k + ic * patch), patch) };
                        for ikw in 0..k_w {
                            let y = y0 + ikw as isize;
                            let run = &mut cell[ikw * k_h..(ikw + 1) * k_h];
                            if y < 0 || y >= w_i as isize {
                                run.fill(T::ZERO);
                                continue;
                            }
                            let in_col = &in_plane[y as usize * h_i..][..h_i];
                            for (ikh, slot) in run.iter_mut().enumerate() {
                                let x = x0 + ikh as isize;
                                *slot = if x >= 0 && x < h_i as isize {
                                    in_col[x as usize]
                                } else {
                                    T::ZERO
                                };
                            }
                        }
                        col += 1;
                    }
                }
            }
        });
    }
    Ok(())
}

/// Explicit two-stage convolution: materialize B̂ = im2col(I), then Ĉ = Â·B̂.
///
/// B̂ is allocated per call and freed on return; a failed allocation is
/// reported as [`ConvError::AllocationFailure`].
pub fn conv_im2col_gemm<T: Element>(
    f: &Tensor4<T>,
    i: &Tensor4<T>,
    cp: &ConvParams,
    bp: &BlockingParams,
    threads: usize,
) -> Result<Tensor4<T>> {
    check_operands(f, i, cp)?;
    let bhat = im2col(i, cp, threads)?;
    let mut o = Tensor4::try_zeros(cp.output_tensor_dims()?)?;
    let a = filters_as_matrix(f);
    let mut c = output_as_matrix(&mut o);
    zero_matrix(&mut c);
    gemm(&a, &bhat.as_ref(), &mut c, gemm_dims(cp)?, bp, threads)?;
    Ok(o)
}

/// [`conv_im2col_gemm`] on raw buffers with a caller-provided B̂ workspace.
#[allow(clippy::too_many_arguments)]
pub fn conv_im2col_gemm_into<T: Element>(
    f: &[T],
    input: &[T],
    cp: &ConvParams,
    bp: &BlockingParams,
    threads: usize,
    workspace: &mut [T],
    out: &mut [T],
) -> Result<()> {
    let d = gemm_dims(cp)?;
    im2col_into(input, cp, workspace, threads)?;
    let a = MatRef::new(f, 0, d.m, d.k, d.m)?;
    let bhat = MatRef::new(workspace, 0, d.k, d.n, d.k.max(1))?;
    let mut c = MatMut::new(out, 0, d.m, d.n, d.m)?;
    zero_matrix(&mut c);
    gemm(&a, &bhat, &mut c, d, bp, threads)?;
    Ok(())
}

/// Allocates a B̂-sized workspace, surfacing failure instead of aborting.
pub fn alloc_workspace<T: Element>(elements: usize) -> Result<Vec<T>> {
    try_alloc(elements)
}
