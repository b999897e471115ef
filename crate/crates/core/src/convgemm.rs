//! Fused convolution: im2col performed inside the packing of `Bc`.
//!
//! [`Im2colSource`] presents the input tensor as the logical matrix B̂ without
//! materializing it. GEMM asks it for one `kc × nr` micro-panel at a time and
//! it gathers those elements straight from the tensor, so the only scratch the
//! whole convolution needs is the `Ac`/`Bc` pair GEMM allocates anyway.

use crate::conv::{check_len, check_operands};
use crate::error::{ConvError, Result};
use crate::gemm::{gemm, pack_b, zero_matrix, BlockingParams, GemmStats, PackedPanel, PackingSource};
use crate::team::Team;
use crate::tensor::{
    filters_as_matrix, gemm_dims, output_as_matrix, output_dims, ConvParams, Element, MatMut, MatRef, Tensor4,
};

/// B̂ row `r` → `(i_c, i_kw, i_kh)`.
#[inline]
pub fn decompose_row(r: usize, cp: &ConvParams) -> (usize, usize, usize) {
    let patch = cp.k_h * cp.k_w;
    let rem = r % patch;
    (r / patch, rem / cp.k_h, rem % cp.k_h)
}

/// B̂ column `c` → `(i_b, i_w, i_h)`.
#[inline]
pub fn decompose_col(c: usize, cp: &ConvParams) -> Result<(usize, usize, usize)> {
    let (h_o, w_o) = output_dims(cp)?;
    Ok(split_col(c, h_o, w_o))
}

#[inline]
fn split_col(c: usize, h_o: usize, w_o: usize) -> (usize, usize, usize) {
    let plane = h_o * w_o;
    let rem = c % plane;
    (c / plane, rem / h_o, rem % h_o)
}

/// The input tensor viewed as B̂ = im2col(I).
#[derive(Clone, Copy, Debug)]
pub struct Im2colSource<'a, T> {
    input: &'a [T],
    cp: ConvParams,
    h_o: usize,
    w_o: usize,
}

impl<'a, T: Element> Im2colSource<'a, T> {
    pub fn new(input: &'a Tensor4<T>, cp: &ConvParams) -> Result<Self> {
        if input.dims() != cp.input_dims() {
            return Err(ConvError::DimensionMismatch(format!(
                "input is {:?}, geometry expects {:?}",
                input.dims(),
                cp.input_dims()
            )));
        }
        Self::from_slice(input.data(), cp)
    }

    /// Wraps a raw `h_i × w_i × c_i × b` buffer.
    pub fn from_slice(input: &'a [T], cp: &ConvParams) -> Result<Self> {
        let (h_o, w_o) = output_dims(cp)?;
        check_len("input", input.len(), cp.h_i * cp.w_i * cp.c_i * cp.b)?;
        Ok(Self {
            input,
            cp: *cp,
            h_o,
            w_o,
        })
    }

    pub fn params(&self) -> &ConvParams {
        &self.cp
    }

    /// Splits columns `j0..j0 + cols` into runs that share an image and an
    /// output column, so their windows start `s` apart along one input column.
    fn segments(&self, j0: usize, cols: usize, out: &mut [Segment]) -> usize {
        let ConvParams {
            h_i, w_i, c_i, s, p, ..
        } = self.cp;
        let (s, p) = (s as isize, p as isize);
        let (mut ib, mut iw, mut ih) = split_col(j0, self.h_o, self.w_o);
        let mut n = 0;
        let mut js = 0;
        while js < cols {
            let len = (self.h_o - ih).min(cols - js);
            out[n] = Segment {
                start: js,
                len,
                x0: ih as isize * s - p,
                y0: iw as isize * s - p,
                base: ib * h_i * w_i * c_i,
            };
            n += 1;
            js += len;
            ih = 0;
            iw += 1;
            if iw == self.w_o {
                iw = 0;
                ib += 1;
            }
        }
        n
    }
}

/// Consecutive micro-panel columns whose windows lie on the same input column.
#[derive(Clone, Copy, Debug, Default)]
struct Segment {
    start: usize,
    len: usize,
    // window origin of the first column; may be negative inside the padding
    x0: isize,
    y0: isize,
    base: usize,
}

/// Micro-panels up to this width keep their column state on the stack.
const STACK_NR: usize = 32;

impl<T: Element> PackingSource<T> for Im2colSource<'_, T> {
    fn rows(&self) -> usize {
        self.cp.k_h * self.cp.k_w * self.cp.c_i
    }

    fn cols(&self) -> usize {
        self.h_o * self.w_o * self.cp.b
    }

    fn get(&self, row: usize, col: usize) -> T {
        let ConvParams {
            h_i, w_i, c_i, s, p, ..
        } = self.cp;
        let (ic, ikw, ikh) = decompose_row(row, &self.cp);
        let (ib, iw, ih) = split_col(col, self.h_o, self.w_o);
        let x = (ih * s + ikh) as isize - p as isize;
        let y = (iw * s + ikw) as isize - p as isize;
        if x < 0 || y < 0 || x as usize >= h_i || y as usize >= w_i {
            return T::ZERO;
        }
        self.input[x as usize + h_i * (y as usize + w_i * (ic + c_i * ib))]
    }

    /// Gathers one micro-panel directly from the input tensor.
    ///
    /// Row and column coordinates are decomposed once per micro-panel and
    /// then advanced with carries, so the element loops do no division. Each
    /// row of the micro-panel is assembled per [`Segment`]: one bounds test
    /// on the segment ends, then a plain (strided) copy when the whole run
    /// lies inside the input.
    fn pack_micro_panel(&self, pc: usize, j0: usize, kc_eff: usize, cols: usize, nr: usize, out: &mut [T]) {
        let mut stack = [Segment::default(); STACK_NR];
        let mut heap;
        let segs: &mut [Segment] = if cols <= STACK_NR {
            &mut stack
        } else {
            heap = vec![Segment::default(); cols];
            &mut heap
        };
        let n_segs = self.segments(j0, cols, segs);
        let segs = &segs[..n_segs];

        let ConvParams {
            k_h, k_w, h_i, w_i, s, ..
        } = self.cp;
        let plane = h_i * w_i;
        let (mut ic, mut ikw, mut ikh) = decompose_row(pc, &self.cp);
        let mut ic_off = ic * plane;
        for row in out[..kc_eff * nr].chunks_exact_mut(nr) {
            let (dx, dy) = (ikh as isize, ikw as isize);
            for seg in segs {
                let dst = &mut row[seg.start..seg.start + seg.len];
                let y = seg.y0 + dy;
                // negative coordinates wrap to huge values and fail the test
                if y as usize >= w_i {
                    dst.fill(T::ZERO);
                    continue;
                }
                let col_off = seg.base + ic_off + y as usize * h_i;
                let src = &self.input[col_off..col_off + h_i];
                let x_first = seg.x0 + dx;
                let x_last = x_first + ((seg.len - 1) * s) as isize;
                if x_first >= 0 && (x_last as usize) < h_i {
                    let x_first = x_first as usize;
                    if s == 1 {
                        dst.copy_from_slice(&src[x_first..x_first + seg.len]);
                    } else {
                        let run = &src[x_first..=x_last as usize];
                        for (t, d) in dst.iter_mut().enumerate() {
                            // Safety: t·s <= (len - 1)·s = x_last - x_first
                            *d = unsafe { *run.get_unchecked(t * s) };
                        }
                    }
                } else {
                    let mut x = x_first;
                    for d in dst.iter_mut() {
                        *d = if (x as usize) < h_i { src[x as usize] } else { T::ZERO };
                        x += s as isize;
                    }
                }
            }
            row[cols..].fill(T::ZERO);

            ikh += 1;
            if ikh == k_h {
                ikh = 0;
                ikw += 1;
                if ikw == k_w {
                    ikw = 0;
                    ic += 1;
                    ic_off += plane;
                }
            }
        }
        debug_assert!(ic <= self.cp.c_i);
    }
}

/// Packs the `kc_eff × nc_eff` block of im2col(I) at `(pc, jc)` into `Bc`,
/// reading directly from the input tensor. The micro-panel loop is split
/// across `team`.
#[allow(clippy::too_many_arguments)]
pub fn pack_b_im2col<T: Element>(
    src: &Im2colSource<'_, T>,
    pc: usize,
    jc: usize,
    kc_eff: usize,
    nc_eff: usize,
    bp: &BlockingParams,
    out: &mut PackedPanel<T>,
    team: &Team,
) {
    pack_b(src, pc, jc, kc_eff, nc_eff, bp, out, team);
}

/// Fused convolution `O = Â · im2col(I)` without materializing im2col(I).
pub fn conv_gemm<T: Element>(
    f: &Tensor4<T>,
    i: &Tensor4<T>,
    cp: &ConvParams,
    bp: &BlockingParams,
    threads: usize,
) -> Result<Tensor4<T>> {
    check_operands(f, i, cp)?;
    let mut o = Tensor4::try_zeros(cp.output_tensor_dims()?)?;
    let src = Im2colSource::new(i, cp)?;
    let a = filters_as_matrix(f);
    let mut c = output_as_matrix(&mut o);
    zero_matrix(&mut c);
    gemm(&a, &src, &mut c, gemm_dims(cp)?, bp, threads)?;
    Ok(o)
}

/// [`conv_gemm`] on raw leftmost-fastest buffers; `out` is overwritten.
pub fn conv_gemm_into<T: Element>(
    f: &[T],
    input: &[T],
    cp: &ConvParams,
    bp: &BlockingParams,
    threads: usize,
    out: &mut [T],
) -> Result<GemmStats> {
    let d = gemm_dims(cp)?;
    let src = Im2colSource::from_slice(input, cp)?;
    let a = MatRef::new(f, 0, d.m, d.k, d.m)?;
    let mut c = MatMut::new(out, 0, d.m, d.n, d.m)?;
    zero_matrix(&mut c);
    gemm(&a, &src, &mut c, d, bp, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv_direct, conv_im2col_gemm, im2col};
    use crate::scratch;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn square(k_n: usize, k: usize, c_i: usize, hw: usize, b: usize, s: usize, p: usize) -> ConvParams {
        ConvParams {
            k_n,
            k_h: k,
            k_w: k,
            c_i,
            h_i: hw,
            w_i: hw,
            b,
            s,
            p,
        }
    }

    fn random_tensor(dims: [usize; 4], rng: &mut StdRng) -> Tensor4<f32> {
        Tensor4::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn row_decomposition() {
        let g = square(1, 3, 2, 5, 1, 1, 0);
        assert_eq!(decompose_row(4, &g), (0, 1, 1));
        assert_eq!(decompose_row(0, &g), (0, 0, 0));
        let l2 = square(64, 11, 3, 224, 1, 4, 0);
        assert_eq!(decompose_row(362, &l2), (2, 10, 10));
    }

    #[test]
    fn col_decomposition() {
        let g = square(1, 3, 1, 7, 2, 1, 0);
        assert_eq!(decompose_col(0, &g).unwrap(), (0, 0, 0));
        assert_eq!(decompose_col(25, &g).unwrap(), (1, 0, 0));
        let l2 = square(64, 11, 3, 224, 2, 4, 0);
        assert_eq!(decompose_col(2916 + 55, &l2).unwrap(), (1, 1, 1));
    }

    /// pack_b_im2col vs pack_b over the materialized im2col, for every block.
    fn check_all_blocks(cp: &ConvParams, bp: &BlockingParams, rng: &mut StdRng, threads: usize) -> usize {
        let i = random_tensor(cp.input_dims(), rng);
        let bhat = im2col(&i, cp, 1).unwrap();
        let src = Im2colSource::new(&i, cp).unwrap();
        let team = Team::new(threads);
        let (k, n) = (bhat.rows(), bhat.cols());
        let mut fused = PackedPanel::for_b(bp).unwrap();
        let mut explicit = PackedPanel::for_b(bp).unwrap();
        let mut blocks = 0;
        for jc in (0..n).step_by(bp.nc) {
            let nc_eff = bp.nc.min(n - jc);
            for pc in (0..k).step_by(bp.kc) {
                let kc_eff = bp.kc.min(k - pc);
                pack_b_im2col(&src, pc, jc, kc_eff, nc_eff, bp, &mut fused, &team);
                pack_b(&bhat.as_ref(), pc, jc, kc_eff, nc_eff, bp, &mut explicit, &team);
                let (a, b) = (fused.packed(), explicit.packed());
                assert_eq!(a.len(), b.len());
                assert!(
                    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "block ({pc},{jc}) differs for {cp:?} {bp:?}"
                );
                blocks += 1;
            }
        }
        blocks
    }

    #[test]
    fn pointwise_pack_is_relayout() {
        let mut rng = StdRng::seed_from_u64(1);
        let cp = square(1, 1, 3, 4, 2, 1, 0);
        let bp = BlockingParams::new(4, 8, 2, 2, 4).unwrap();
        check_all_blocks(&cp, &bp, &mut rng, 1);
    }

    #[test]
    fn randomized_pack_matches_explicit() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..60 {
            let cp = ConvParams {
                k_n: 1,
                k_h: rng.gen_range(1..4),
                k_w: rng.gen_range(1..4),
                c_i: rng.gen_range(1..5),
                h_i: rng.gen_range(3..8),
                w_i: rng.gen_range(3..8),
                b: rng.gen_range(1..4),
                s: rng.gen_range(1..3),
                p: rng.gen_range(0..2),
            };
            let mr = rng.gen_range(1..5);
            let nr = rng.gen_range(1..7);
            let bp = BlockingParams::new(mr * 2, nr * rng.gen_range(1..4), rng.gen_range(1..9), mr, nr).unwrap();
            let threads = rng.gen_range(1..4);
            check_all_blocks(&cp, &bp, &mut rng, threads);
        }
    }

    #[test]
    fn block_straddling_images() {
        let mut rng = StdRng::seed_from_u64(3);
        // h_o·w_o = 9 per image; nc = 6 puts a block boundary mid-image and
        // block 1 (cols 6..12) spans images 0 and 1
        let cp = square(1, 2, 2, 4, 3, 1, 0);
        let bp = BlockingParams::new(2, 6, 3, 2, 3).unwrap();
        assert!(check_all_blocks(&cp, &bp, &mut rng, 2) > 4);
        // wide micro-panels use the heap column state
        let bp = BlockingParams::new(2, 40, 5, 2, 40).unwrap();
        check_all_blocks(&cp, &bp, &mut rng, 1);
    }

    #[test]
    fn conv_gemm_matches_direct() {
        let mut rng = StdRng::seed_from_u64(4);
        let cp = square(2, 2, 1, 3, 1, 1, 0);
        let f = random_tensor(cp.filter_dims(), &mut rng);
        let i = random_tensor(cp.input_dims(), &mut rng);
        let want = conv_direct(&f, &i, &cp).unwrap();
        let got = conv_gemm(&f, &i, &cp, &BlockingParams::default(), 1).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn conv_gemm_bitwise_equals_explicit_alexnet_layer7() {
        let mut rng = StdRng::seed_from_u64(5);
        let cp = square(384, 3, 384, 13, 1, 1, 0);
        let f = random_tensor(cp.filter_dims(), &mut rng);
        let i = random_tensor(cp.input_dims(), &mut rng);
        let bp = BlockingParams::default();
        let fused = conv_gemm(&f, &i, &cp, &bp, 2).unwrap();
        let explicit = conv_im2col_gemm(&f, &i, &cp, &bp, 2).unwrap();
        assert!(fused
            .data()
            .iter()
            .zip(explicit.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn conv_gemm_scratch_is_only_pack_buffers() {
        let mut rng = StdRng::seed_from_u64(6);
        let cp = square(192, 5, 64, 55, 1, 1, 0);
        let f = random_tensor(cp.filter_dims(), &mut rng);
        let i = random_tensor(cp.input_dims(), &mut rng);
        let bp = BlockingParams::default();
        let (res, peak) = scratch::measure_peak(|| conv_gemm(&f, &i, &cp, &bp, 1));
        res.unwrap();
        assert_eq!(peak, 8_171_520);
        assert!(peak < crate::conv::im2col_workspace_bytes(&cp).unwrap() as usize);
    }

    #[test]
    fn get_agrees_with_packed_panels() {
        let mut rng = StdRng::seed_from_u64(7);
        let cp = square(1, 3, 2, 5, 2, 2, 1);
        let i = random_tensor(cp.input_dims(), &mut rng);
        let src = Im2colSource::new(&i, &cp).unwrap();
        let bhat = im2col(&i, &cp, 1).unwrap();
        for r in 0..src.rows() {
            for c in 0..src.cols() {
                assert_eq!(src.get(r, c), bhat.get(r, c));
            }
        }
    }
}
