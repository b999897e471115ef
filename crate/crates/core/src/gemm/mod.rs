//! Five-loop blocked GEMM, `C += A·B̂`.
//!
//! ```text
//! L1: for jc in 0..n step nc
//! L2:   for pc in 0..k step kc
//!         pack B̂(pc.., jc..) -> Bc
//! L3:     for ic in 0..m step mc
//!           pack A(ic.., pc..) -> Ac
//! L4:       for jr in 0..nc step nr        (split across the team)
//! L5:         for ir in 0..mc step mr
//!               C(ic+ir.., jc+jr..) += Ar · Br
//! ```
//!
//! B̂ is supplied through [`PackingSource`], which is how the fused
//! convolution plugs its on-the-fly im2col into the same engine.

mod kernel;
mod pack;

#[cfg(target_arch = "x86_64")]
pub use kernel::Fma;
pub use kernel::{microkernel, select as select_kernel, Dynamic, MicroKernel, Portable};
pub use pack::{pack_a, pack_b, PackedPanel};

use crate::error::{ConvError, Result};
use crate::team::Team;
use crate::tensor::{Element, GemmDims, MatMut, MatRef};

/// Cache (`mc`, `nc`, `kc`) and register (`mr`, `nr`) blocking.
///
/// The defaults are the Cortex-A57 values shipped with BLIS 0.6.0 for sgemm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockingParams {
    pub mc: usize,
    pub nc: usize,
    pub kc: usize,
    pub mr: usize,
    pub nr: usize,
}

impl Default for BlockingParams {
    fn default() -> Self {
        Self {
            mc: 120,
            nc: 3072,
            kc: 640,
            mr: 8,
            nr: 12,
        }
    }
}

impl BlockingParams {
    /// Validates and normalizes: `mc` and `nc` are rounded down to multiples
    /// of `mr` and `nr` so packed blocks never outgrow `mc·kc` / `kc·nc`.
    pub fn new(mc: usize, nc: usize, kc: usize, mr: usize, nr: usize) -> Result<Self> {
        if [mc, nc, kc, mr, nr].contains(&0) {
            return Err(ConvError::InvalidGeometry(
                "blocking parameters must be positive".into(),
            ));
        }
        if mr > mc || nr > nc {
            return Err(ConvError::InvalidGeometry(format!(
                "register tile {mr}x{nr} larger than cache block {mc}x{nc}"
            )));
        }
        Ok(Self {
            mc: mc - mc % mr,
            nc: nc - nc % nr,
            kc,
            mr,
            nr,
        })
    }

    /// Elements in the `Ac` buffer.
    pub fn ac_len(&self) -> usize {
        self.mc * self.kc
    }

    /// Elements in the `Bc` buffer.
    pub fn bc_len(&self) -> usize {
        self.kc * self.nc
    }

    /// Bytes of packing scratch one GEMM call allocates for element type `T`.
    pub fn scratch_bytes<T>(&self) -> usize {
        (self.ac_len() + self.bc_len()) * std::mem::size_of::<T>()
    }
}

/// Provider of the logical right-hand operand B̂.
///
/// Implementors only have to answer element queries; [`pack_micro_panel`]
/// has a generic default following the packing loop order (rows outer,
/// columns inner) and can be overridden with a faster equivalent.
///
/// [`pack_micro_panel`]: PackingSource::pack_micro_panel
pub trait PackingSource<T: Element>: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn get(&self, row: usize, col: usize) -> T;

    /// Writes the `kc_eff × nr` row-major micro-panel whose top-left element
    /// is `(pc, j0)` into `out`; only the first `cols` columns are in range,
    /// the rest are zero.
    fn pack_micro_panel(&self, pc: usize, j0: usize, kc_eff: usize, cols: usize, nr: usize, out: &mut [T]) {
        for (ps, row) in out[..kc_eff * nr].chunks_exact_mut(nr).enumerate() {
            for (js, slot) in row.iter_mut().enumerate() {
                *slot = if js < cols { self.get(pc + ps, j0 + js) } else { T::ZERO };
            }
        }
    }
}

impl<T: Element> PackingSource<T> for MatRef<'_, T> {
    fn rows(&self) -> usize {
        MatRef::rows(self)
    }

    fn cols(&self) -> usize {
        MatRef::cols(self)
    }

    fn get(&self, row: usize, col: usize) -> T {
        MatRef::get(self, row, col)
    }

    fn pack_micro_panel(&self, pc: usize, j0: usize, kc_eff: usize, cols: usize, nr: usize, out: &mut [T]) {
        // walk each source column contiguously
        for js in 0..cols {
            let col = &self.col(j0 + js)[pc..pc + kc_eff];
            for (ps, &v) in col.iter().enumerate() {
                out[ps * nr + js] = v;
            }
        }
        if cols < nr {
            for row in out[..kc_eff * nr].chunks_exact_mut(nr) {
                row[cols..].fill(T::ZERO);
            }
        }
    }
}

/// Work done for one `(jc, pc)` iteration of loop L2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRecord {
    pub jc: usize,
    pub pc: usize,
    /// Elements moved into `Bc`: `kc_eff · nc_eff`.
    pub b_packed: usize,
    /// Flops executed under loop L3 with this `Bc`: `2 · m · nc_eff · kc_eff`.
    pub flops: u64,
}

/// Counters gathered by one [`gemm`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GemmStats {
    pub a_packs: usize,
    pub b_packs: usize,
    pub a_packed: usize,
    pub b_packed: usize,
    pub flops: u64,
    pub blocks: Vec<BlockRecord>,
    /// Bytes of `Ac` + `Bc` allocated.
    pub scratch_bytes: usize,
}

/// `C += A · B̂` with the five-loop blocked algorithm on `threads` workers.
///
/// Loop L4 and the micro-panel loops of both packing routines are split
/// statically across the team. Each C tile is owned by exactly one worker and
/// accumulated in a fixed order, so results are identical for every thread
/// count.
pub fn gemm<T: Element, S: PackingSource<T> + ?Sized>(
    a: &MatRef<'_, T>,
    src: &S,
    c: &mut MatMut<'_, T>,
    dims: GemmDims,
    bp: &BlockingParams,
    threads: usize,
) -> Result<GemmStats> {
    let kernel = select_kernel::<T>(bp.mr, bp.nr);
    gemm_with_kernel(a, src, c, dims, bp, &Team::new(threads), kernel.as_ref())
}

/// [`gemm`] with an explicit team and micro-kernel.
pub fn gemm_with_kernel<T: Element, S: PackingSource<T> + ?Sized>(
    a: &MatRef<'_, T>,
    src: &S,
    c: &mut MatMut<'_, T>,
    dims: GemmDims,
    bp: &BlockingParams,
    team: &Team,
    kernel: &dyn MicroKernel<T>,
) -> Result<GemmStats> {
    let GemmDims { m, n, k } = dims;
    check_dims(a, src, c, dims)?;
    if kernel.mr() != bp.mr || kernel.nr() != bp.nr {
        return Err(ConvError::DimensionMismatch(format!(
            "kernel tile {}x{} does not match blocking {}x{}",
            kernel.mr(),
            kernel.nr(),
            bp.mr,
            bp.nr
        )));
    }
    let mut stats = GemmStats::default();
    if m == 0 || n == 0 || k == 0 {
        return Ok(stats);
    }

    let mut ac = PackedPanel::<T>::for_a(bp)?;
    let mut bc = PackedPanel::<T>::for_b(bp)?;
    stats.scratch_bytes = ac.bytes() + bc.bytes();
    let ldc = c.ld();

    for jc in (0..n).step_by(bp.nc) {
        let nc_eff = bp.nc.min(n - jc);
        for pc in (0..k).step_by(bp.kc) {
            let kc_eff = bp.kc.min(k - pc);
            pack_b(src, pc, jc, kc_eff, nc_eff, bp, &mut bc, team);
            stats.b_packs += 1;
            stats.b_packed += kc_eff * nc_eff;
            let mut block_flops = 0u64;

            for ic in (0..m).step_by(bp.mc) {
                let mc_eff = bp.mc.min(m - ic);
                pack_a(a, ic, pc, mc_eff, kc_eff, bp, &mut ac, team);
                stats.a_packs += 1;
                stats.a_packed += mc_eff * kc_eff;

                macro_kernel(&ac, &bc, c.col_span_mut(jc, jc + nc_eff), ldc, ic, bp, team, kernel);
                block_flops += 2 * (mc_eff * nc_eff * kc_eff) as u64;
            }
            stats.flops += block_flops;
            stats.blocks.push(BlockRecord {
                jc,
                pc,
                b_packed: kc_eff * nc_eff,
                flops: block_flops,
            });
        }
    }
    Ok(stats)
}

/// Loops L4/L5 over one packed `Ac`/`Bc` pair. `strip` starts at row 0 of the
/// block's first column.
#[allow(clippy::too_many_arguments)]
fn macro_kernel<T: Element>(
    ac: &PackedPanel<T>,
    bc: &PackedPanel<T>,
    strip: &mut [T],
    ldc: usize,
    ic: usize,
    bp: &BlockingParams,
    team: &Team,
    kernel: &dyn MicroKernel<T>,
) {
    let (mr, nr) = (bp.mr, bp.nr);
    let (mc_eff, kc_eff) = ac.extent();
    let nc_eff = bc.extent().1;
    let col_panels = bc.panels();
    team.for_each_chunk_mut(strip, col_panels, nr * ldc, |panels, chunk| {
        let first = panels.start;
        for q in panels {
            let jr = q * nr;
            let n_eff = nr.min(nc_eff - jr);
            let br = bc.micro_panel(q);
            let col0 = (q - first) * nr * ldc;
            for (qa, ir) in (0..mc_eff).step_by(mr).enumerate() {
                let m_eff = mr.min(mc_eff - ir);
                let off = col0 + ic + ir;
                kernel.run(kc_eff, ac.micro_panel(qa), br, &mut chunk[off..], ldc, m_eff, n_eff);
            }
        }
    });
}

fn check_dims<T: Element, S: PackingSource<T> + ?Sized>(
    a: &MatRef<'_, T>,
    src: &S,
    c: &MatMut<'_, T>,
    dims: GemmDims,
) -> Result<()> {
    let GemmDims { m, n, k } = dims;
    let shapes = [
        ("A", (a.rows(), a.cols()), (m, k)),
        ("B", (src.rows(), src.cols()), (k, n)),
        ("C", (c.rows(), c.cols()), (m, n)),
    ];
    for (name, got, want) in shapes {
        if got != want {
            return Err(ConvError::DimensionMismatch(format!(
                "{name} is {}x{}, expected {}x{} for m={m} n={n} k={k}",
                got.0, got.1, want.0, want.1
            )));
        }
    }
    Ok(())
}

/// Sets every entry of `c` to `+0.0`.
pub fn zero_matrix<T: Element>(c: &mut MatMut<'_, T>) {
    let (m, n) = (c.rows(), c.cols());
    if m == 0 || n == 0 {
        return;
    }
    let ld = c.ld();
    let span = c.col_span_mut(0, n);
    for j in 0..n {
        span[j * ld..j * ld + m].fill(T::ZERO);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn random(m: usize, n: usize, rng: &mut StdRng) -> Matrix<f32> {
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn naive(a: &Matrix<f32>, b: &Matrix<f32>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = vec![0.0f64; m * n];
        for j in 0..n {
            for p in 0..k {
                for i in 0..m {
                    c[i + j * m] += a.get(i, p) as f64 * b.get(p, j) as f64;
                }
            }
        }
        c
    }

    #[test]
    fn blocking_validation() {
        assert!(BlockingParams::new(4, 4, 4, 8, 2).is_err());
        assert!(BlockingParams::new(4, 4, 0, 2, 2).is_err());
        let bp = BlockingParams::new(10, 13, 5, 4, 3).unwrap();
        assert_eq!((bp.mc, bp.nc), (8, 12));
        assert_eq!(BlockingParams::default().scratch_bytes::<f32>(), 8_171_520);
    }

    #[test]
    fn identity_times_b() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0f32 } else { 0.0 });
        let b = random(3, 4, &mut rng);
        let mut c = Matrix::<f32>::zeros(3, 4);
        gemm(
            &a.as_ref(),
            &b.as_ref(),
            &mut c.as_mut(),
            GemmDims::new(3, 4, 3),
            &BlockingParams::default(),
            1,
        )
        .unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn scalar_multiply_accumulate() {
        let a = Matrix::from_col_major(1, 1, vec![3.0f32]).unwrap();
        let b = Matrix::from_col_major(1, 1, vec![4.0f32]).unwrap();
        let mut c = Matrix::from_col_major(1, 1, vec![1.0f32]).unwrap();
        gemm(
            &a.as_ref(),
            &b.as_ref(),
            &mut c.as_mut(),
            GemmDims::new(1, 1, 1),
            &BlockingParams::default(),
            1,
        )
        .unwrap();
        assert_eq!(c.data(), &[13.0]);
    }

    #[test]
    fn alexnet_layer7_dims_match_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let (m, n, k) = (384, 121, 3456);
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        let mut c = Matrix::<f32>::zeros(m, n);
        let stats = gemm(
            &a.as_ref(),
            &b.as_ref(),
            &mut c.as_mut(),
            GemmDims::new(m, n, k),
            &BlockingParams::default(),
            2,
        )
        .unwrap();
        let want = naive(&a, &b);
        let abs = |x: &Matrix<f32>| Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j).abs());
        let mass = naive(&abs(&a), &abs(&b));
        // forward error bound of a length-k f32 dot product
        let u = f32::EPSILON as f64 / 2.0;
        for ((got, want), mass) in c.data().iter().zip(&want).zip(&mass) {
            assert!((*got as f64 - want).abs() <= k as f64 * u * mass);
        }
        assert_eq!(stats.flops, 2 * (m * n * k) as u64);
        // Bc once per (jc, pc), Ac once per (jc, pc, ic)
        assert_eq!(stats.b_packs, 6);
        assert_eq!(stats.a_packs, 6 * 4);
    }

    #[test]
    fn accumulates_into_existing_c_with_offset_view() {
        let mut rng = StdRng::seed_from_u64(3);
        let (m, n, k) = (5, 7, 4);
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        // C lives inside a larger buffer: ld 9, base 2
        let mut buf = vec![1.0f32; 2 + 9 * n];
        let mut c = MatMut::new(&mut buf, 2, m, n, 9).unwrap();
        let bp = BlockingParams::new(4, 6, 3, 2, 3).unwrap();
        gemm(&a.as_ref(), &b.as_ref(), &mut c, GemmDims::new(m, n, k), &bp, 3).unwrap();
        let want = naive(&a, &b);
        for j in 0..n {
            for i in 0..9 {
                let got = buf[2 + i + j * 9];
                if i < m {
                    assert!((got as f64 - (1.0 + want[i + j * m])).abs() < 1e-5);
                } else {
                    assert_eq!(got, 1.0, "padding row touched");
                }
            }
        }
        assert_eq!(&buf[..2], &[1.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(4, 2);
        let mut c = Matrix::<f32>::zeros(2, 2);
        let err = gemm(
            &a.as_ref(),
            &b.as_ref(),
            &mut c.as_mut(),
            GemmDims::new(2, 2, 3),
            &BlockingParams::default(),
            1,
        );
        assert!(matches!(err, Err(ConvError::DimensionMismatch(_))));
    }

    #[test]
    fn packing_cost_is_amortized() {
        let mut rng = StdRng::seed_from_u64(4);
        let (m, n, k) = (20, 30, 17);
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        let mut c = Matrix::<f32>::zeros(m, n);
        let bp = BlockingParams::new(8, 12, 5, 4, 4).unwrap();
        let stats = gemm(
            &a.as_ref(),
            &b.as_ref(),
            &mut c.as_mut(),
            GemmDims::new(m, n, k),
            &bp,
            1,
        )
        .unwrap();
        assert_eq!(stats.blocks.len(), 3 * 4);
        for blk in &stats.blocks {
            let nc_eff = bp.nc.min(n - blk.jc);
            let kc_eff = bp.kc.min(k - blk.pc);
            assert_eq!(blk.b_packed, kc_eff * nc_eff);
            assert_eq!(blk.flops, 2 * (m * nc_eff * kc_eff) as u64);
            assert_eq!(blk.flops, 2 * m as u64 * blk.b_packed as u64);
        }
        assert_eq!(stats.b_packed, k * n);
        assert_eq!(stats.flops, 2 * (m * n * k) as u64);
    }

    #[test]
    fn zero_matrix_clears_view_only() {
        let mut buf = vec![7.0f32; 12];
        {
            let mut c = MatMut::new(&mut buf, 0, 3, 2, 4).unwrap();
            zero_matrix(&mut c);
            zero_matrix(&mut c);
        }
        assert_eq!(buf, [0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 7.0, 7.0, 7.0, 7.0, 7.0]);
        let mut one = Matrix::from_col_major(1, 1, vec![3.0f64]).unwrap();
        zero_matrix(&mut one.as_mut());
        assert_eq!(one.data(), &[0.0]);
    }

    #[test]
    fn custom_kernel_plugs_in() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = random(9, 11, &mut rng);
        let b = random(11, 13, &mut rng);
        let bp = BlockingParams::new(8, 12, 4, 8, 12).unwrap();
        let mut c1 = Matrix::<f32>::zeros(9, 13);
        let mut c2 = Matrix::<f32>::zeros(9, 13);
        let dims = GemmDims::new(9, 13, 11);
        let team = Team::new(1);
        gemm_with_kernel(
            &a.as_ref(),
            &b.as_ref(),
            &mut c1.as_mut(),
            dims,
            &bp,
            &team,
            &Portable::<8, 12>,
        )
        .unwrap();
        let dynamic = Dynamic { mr: 8, nr: 12 };
        gemm_with_kernel(&a.as_ref(), &b.as_ref(), &mut c2.as_mut(), dims, &bp, &team, &dynamic).unwrap();
        assert_eq!(c1, c2);
    }
}
