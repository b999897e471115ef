//! Packing of A blocks into `Ac` and B blocks into `Bc`.
//!
//! `Ac` holds `⌈mc/mr⌉` micro-panels of `mr × kc`, each column-major.
//! `Bc` holds `⌈nc/nr⌉` micro-panels of `kc × nr`, each row-major.
//! Rows (of `Ac`) or columns (of `Bc`) past the end of the block are
//! zero-filled inside the last micro-panel, so the micro-kernel always sees a
//! full register tile.

use super::{BlockingParams, PackingSource};
use crate::error::Result;
use crate::scratch::AlignedBuf;
use crate::team::Team;
use crate::tensor::{Element, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    A,
    B,
}

/// An aligned `Ac` or `Bc` buffer, allocated once per GEMM call and reused
/// for every block.
pub struct PackedPanel<T> {
    data: AlignedBuf<T>,
    side: Side,
    micro: usize,
    // extent along the micro-panel split (mc_eff for Ac, nc_eff for Bc)
    span: usize,
    kc: usize,
}

impl<T: Element> PackedPanel<T> {
    /// `Ac` buffer with capacity `mc·kc`.
    pub fn for_a(bp: &BlockingParams) -> Result<Self> {
        Ok(Self {
            data: AlignedBuf::zeroed(bp.ac_len())?,
            side: Side::A,
            micro: bp.mr,
            span: 0,
            kc: 0,
        })
    }

    /// `Bc` buffer with capacity `kc·nc`.
    pub fn for_b(bp: &BlockingParams) -> Result<Self> {
        Ok(Self {
            data: AlignedBuf::zeroed(bp.bc_len())?,
            side: Side::B,
            micro: bp.nr,
            span: 0,
            kc: 0,
        })
    }
}

impl<T> PackedPanel<T> {
    /// Logical `(rows, cols)` of the block currently packed.
    pub fn extent(&self) -> (usize, usize) {
        match self.side {
            Side::A => (self.span, self.kc),
            Side::B => (self.kc, self.span),
        }
    }

    /// `mr` for `Ac`, `nr` for `Bc`.
    pub fn micro(&self) -> usize {
        self.micro
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> usize {
        self.data.bytes()
    }

    pub fn panel_len(&self) -> usize {
        self.micro * self.kc
    }

    pub fn panels(&self) -> usize {
        self.span.div_ceil(self.micro)
    }

    pub fn micro_panel(&self, q: usize) -> &[T] {
        let len = self.panel_len();
        &self.data[q * len..(q + 1) * len]
    }

    /// Packed contents of the current block, all micro-panels in order.
    pub fn packed(&self) -> &[T] {
        &self.data[..self.panels() * self.panel_len()]
    }

    fn begin(&mut self, span: usize, kc: usize) -> &mut [T] {
        self.span = span;
        self.kc = kc;
        let used = self.panels() * self.panel_len();
        assert!(
            used <= self.data.len(),
            "block {span}x{kc} exceeds packing buffer of {} elements",
            self.data.len()
        );
        &mut self.data[..used]
    }
}

/// Packs `A(ic..ic+mc_eff, pc..pc+kc_eff)` into `out`.
///
/// The loop over micro-panels (the outermost packing loop) is split across
/// `team`.
#[allow(clippy::too_many_arguments)]
pub fn pack_a<T: Element>(
    a: &MatRef<'_, T>,
    ic: usize,
    pc: usize,
    mc_eff: usize,
    kc_eff: usize,
    bp: &BlockingParams,
    out: &mut PackedPanel<T>,
    team: &Team,
) {
    debug_assert!(ic + mc_eff <= a.rows() && pc + kc_eff <= a.cols());
    let mr = bp.mr;
    debug_assert_eq!(out.micro, mr);
    let dst = out.begin(mc_eff, kc_eff);
    let panel_len = mr * kc_eff;
    let panels = mc_eff.div_ceil(mr);
    team.for_each_chunk_mut(dst, panels, panel_len, |range, chunk| {
        for (q, panel) in range.zip(chunk.chunks_exact_mut(panel_len)) {
            let i0 = ic + q * mr;
            let rows = mr.min(ic + mc_eff - i0);
            for (p, dst_col) in panel.chunks_exact_mut(mr).enumerate() {
                let col = a.col(pc + p);
                dst_col[..rows].copy_from_slice(&col[i0..i0 + rows]);
                dst_col[rows..].fill(T::ZERO);
            }
        }
    });
}

/// Packs the `kc_eff × nc_eff` block of B̂ at `(pc, jc)` into `out`.
///
/// Each micro-panel is produced by [`PackingSource::pack_micro_panel`], so the
/// source decides how its elements are fetched; the loop over micro-panels
/// is split across `team`.
#[allow(clippy::too_many_arguments)]
pub fn pack_b<T: Element, S: PackingSource<T> + ?Sized>(
    src: &S,
    pc: usize,
    jc: usize,
    kc_eff: usize,
    nc_eff: usize,
    bp: &BlockingParams,
    out: &mut PackedPanel<T>,
    team: &Team,
) {
    debug_assert!(pc + kc_eff <= src.rows() && jc + nc_eff <= src.cols());
    let nr = bp.nr;
    debug_assert_eq!(out.micro, nr);
    let dst = out.begin(nc_eff, kc_eff);
    let panel_len = kc_eff * nr;
    let panels = nc_eff.div_ceil(nr);
    team.for_each_chunk_mut(dst, panels, panel_len, |range, chunk| {
        for (q, panel) in range.zip(chunk.chunks_exact_mut(panel_len)) {
            let j0 = jc + q * nr;
            let cols = nr.min(jc + nc_eff - j0);
            src.pack_micro_panel(pc, j0, kc_eff, cols, nr, panel);
        }
    });
}
