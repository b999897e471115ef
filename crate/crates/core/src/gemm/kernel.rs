//! Micro-kernels.
//!
//! A micro-kernel updates an `mr × nr` tile of C with the product of one
//! packed `Ar` micro-panel (`mr × kc`, column-major) and one packed `Br`
//! micro-panel (`kc × nr`, row-major), as a loop of `kc` rank-1 updates into a
//! local accumulator that is added to C once at the end.
//!
//! Per output element the accumulation order is always `acc = 0; acc += a·b`
//! for `p = 0..kc`, then `C += acc`, regardless of which kernel runs. The
//! const-generic and runtime-sized kernels are therefore interchangeable
//! bit-for-bit. On x86-64 with AVX2 and FMA, [`select`] returns [`Fma`]
//! kernels instead, which keep the same order but fuse each multiply-add, so
//! their results can differ from the portable ones in the last bits.

use crate::tensor::Element;

pub trait MicroKernel<T>: Sync {
    fn mr(&self) -> usize;
    fn nr(&self) -> usize;

    /// `c[i + j·ldc] += Σ_p a[p·mr + i] · b[p·nr + j]` for `i < m_eff`, `j < n_eff`.
    #[allow(clippy::too_many_arguments)]
    fn run(&self, kc: usize, a: &[T], b: &[T], c: &mut [T], ldc: usize, m_eff: usize, n_eff: usize);
}

/// Register tile with compile-time extents.
pub struct Portable<const MR: usize, const NR: usize>;

impl<T: Element, const MR: usize, const NR: usize> MicroKernel<T> for Portable<MR, NR> {
    fn mr(&self) -> usize {
        MR
    }

    fn nr(&self) -> usize {
        NR
    }

    #[inline]
    fn run(&self, kc: usize, a: &[T], b: &[T], c: &mut [T], ldc: usize, m_eff: usize, n_eff: usize) {
        tile::<T, MR, NR, false>(kc, a, b, c, ldc, m_eff, n_eff);
    }
}

#[inline(always)]
fn tile<T: Element, const MR: usize, const NR: usize, const FUSED: bool>(
    kc: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    ldc: usize,
    m_eff: usize,
    n_eff: usize,
) {
    let mut acc = [[T::ZERO; MR]; NR];
    for (ap, bp) in a[..kc * MR].chunks_exact(MR).zip(b[..kc * NR].chunks_exact(NR)) {
        let ap: &[T; MR] = ap.try_into().unwrap();
        let bp: &[T; NR] = bp.try_into().unwrap();
        for j in 0..NR {
            let bj = bp[j];
            for i in 0..MR {
                acc[j][i] = if FUSED {
                    ap[i].mul_add(bj, acc[j][i])
                } else {
                    acc[j][i] + ap[i] * bj
                };
            }
        }
    }
    store(&acc, c, ldc, m_eff, n_eff);
}

/// Register tile compiled for AVX2 with fused multiply-add.
///
/// Only obtainable through [`Fma::detect`], which checks the CPU first.
#[cfg(target_arch = "x86_64")]
pub struct Fma<const MR: usize, const NR: usize>(());

#[cfg(target_arch = "x86_64")]
impl<const MR: usize, const NR: usize> Fma<MR, NR> {
    pub fn detect() -> Option<Self> {
        (is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")).then_some(Self(()))
    }
}

#[cfg(target_arch = "x86_64")]
impl<T: Element, const MR: usize, const NR: usize> MicroKernel<T> for Fma<MR, NR> {
    fn mr(&self) -> usize {
        MR
    }

    fn nr(&self) -> usize {
        NR
    }

    fn run(&self, kc: usize, a: &[T], b: &[T], c: &mut [T], ldc: usize, m_eff: usize, n_eff: usize) {
        // Safety: a value of this type exists only if `detect` saw both features.
        unsafe { fma_tile::<T, MR, NR>(kc, a, b, c, ldc, m_eff, n_eff) }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn fma_tile<T: Element, const MR: usize, const NR: usize>(
    kc: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    ldc: usize,
    m_eff: usize,
    n_eff: usize,
) {
    tile::<T, MR, NR, true>(kc, a, b, c, ldc, m_eff, n_eff);
}

#[inline(always)]
fn store<T: Element, const MR: usize, const NR: usize>(
    acc: &[[T; MR]; NR],
    c: &mut [T],
    ldc: usize,
    m_eff: usize,
    n_eff: usize,
) {
    if m_eff == MR {
        for (j, col) in acc.iter().enumerate().take(n_eff) {
            let dst = &mut c[j * ldc..j * ldc + MR];
            for (d, v) in dst.iter_mut().zip(col) {
                *d += *v;
            }
        }
    } else {
        for (j, col) in acc.iter().enumerate().take(n_eff) {
            for (i, v) in col.iter().enumerate().take(m_eff) {
                c[i + j * ldc] += *v;
            }
        }
    }
}

/// Fallback for register tiles without a specialized kernel.
pub struct Dynamic {
    pub mr: usize,
    pub nr: usize,
}

impl<T: Element> MicroKernel<T> for Dynamic {
    fn mr(&self) -> usize {
        self.mr
    }

    fn nr(&self) -> usize {
        self.nr
    }

    fn run(&self, kc: usize, a: &[T], b: &[T], c: &mut [T], ldc: usize, m_eff: usize, n_eff: usize) {
        let (mr, nr) = (self.mr, self.nr);
        let mut stack = [T::ZERO; 256];
        let mut heap;
        let acc: &mut [T] = if mr * nr <= stack.len() {
            &mut stack[..mr * nr]
        } else {
            heap = vec![T::ZERO; mr * nr];
            &mut heap
        };
        for p in 0..kc {
            let ap = &a[p * mr..p * mr + mr];
            let bp = &b[p * nr..p * nr + nr];
            for (j, &bj) in bp.iter().enumerate() {
                for (i, &ai) in ap.iter().enumerate() {
                    acc[j * mr + i] += ai * bj;
                }
            }
        }
        for j in 0..n_eff {
            for i in 0..m_eff {
                c[i + j * ldc] += acc[j * mr + i];
            }
        }
    }
}

/// Picks a specialized kernel for `(mr, nr)` when one exists.
pub fn select<T: Element>(mr: usize, nr: usize) -> Box<dyn MicroKernel<T>> {
    macro_rules! tiles {
        ($($m:literal x $n:literal),*) => {
            match (mr, nr) {
                $(($m, $n) => {
                    #[cfg(target_arch = "x86_64")]
                    if let Some(k) = Fma::<$m, $n>::detect() {
                        return Box::new(k);
                    }
                    Box::new(Portable::<$m, $n>)
                })*
                _ => Box::new(Dynamic { mr, nr }),
            }
        };
    }
    tiles!(8 x 12, 8 x 8, 8 x 4, 4 x 12, 4 x 8, 4 x 4, 6 x 8, 6 x 16, 16 x 6, 16 x 4)
}

/// Applies the micro-kernel for `mr × nr` tiles to one pair of packed micro-panels.
#[allow(clippy::too_many_arguments)]
pub fn microkernel<T: Element>(
    ar: &[T],
    br: &[T],
    kc: usize,
    mr: usize,
    nr: usize,
    c: &mut [T],
    ldc: usize,
    m_eff: usize,
    n_eff: usize,
) {
    assert!(m_eff <= mr && n_eff <= nr, "edge tile larger than register tile");
    select::<T>(mr, nr).run(kc, ar, br, c, ldc, m_eff, n_eff);
}
