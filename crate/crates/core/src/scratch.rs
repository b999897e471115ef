//! 64-byte aligned packing buffers and a per-thread scratch accounting hook.
//!
//! Every [`AlignedBuf`] registers its size with a thread-local tracker on
//! creation and deregisters on drop. GEMM allocates `Ac`/`Bc` on the calling
//! thread, so [`measure_peak`] around a call observes exactly the scratch that
//! call needed.

use std::alloc::{self, Layout};
use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::ptr::NonNull;

use crate::error::{ConvError, Result};
use crate::tensor::Element;

pub const ALIGN: usize = 64;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn acquire(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| p.set(p.get().max(now)));
    });
}

fn release(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Bytes of tracked scratch currently live on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(Cell::get)
}

/// High-water mark of tracked scratch on this thread.
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Runs `f` and returns its result with the peak tracked scratch (in bytes)
/// that was live during the call, on top of what was live before it.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let before = current_bytes();
    let saved = PEAK.with(|p| p.replace(before));
    let r = f();
    let peak = PEAK.with(|p| {
        let seen = p.get();
        p.set(saved.max(seen));
        seen
    });
    (r, peak - before)
}

/// Zero-initialized, 64-byte aligned element buffer.
pub struct AlignedBuf<T> {
    ptr: NonNull<T>,
    len: usize,
    layout: Layout,
}

// Safety: AlignedBuf owns its allocation exactly like Vec<T>.
unsafe impl<T: Send> Send for AlignedBuf<T> {}
unsafe impl<T: Sync> Sync for AlignedBuf<T> {}

impl<T: Element> AlignedBuf<T> {
    pub fn zeroed(len: usize) -> Result<Self> {
        let bytes = len
            .checked_mul(std::mem::size_of::<T>())
            .ok_or(ConvError::AllocationFailure { bytes: u128::MAX })?;
        let layout = Layout::from_size_align(bytes.max(ALIGN), ALIGN)
            .map_err(|_| ConvError::AllocationFailure { bytes: bytes as u128 })?;
        // Safety: layout has non-zero size. All-zero bits are +0.0 for f32/f64,
        // the only Element implementors.
        let raw = unsafe { alloc::alloc_zeroed(layout) } as *mut T;
        let ptr = NonNull::new(raw).ok_or(ConvError::AllocationFailure { bytes: bytes as u128 })?;
        acquire(bytes);
        Ok(Self { ptr, len, layout })
    }
}

impl<T> AlignedBuf<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> usize {
        self.len * std::mem::size_of::<T>()
    }
}

impl<T> Deref for AlignedBuf<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        // Safety: ptr is valid for len initialized elements for our lifetime.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }
}

impl<T> DerefMut for AlignedBuf<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        // Safety: as above, and &mut self guarantees exclusivity.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len) }
    }
}

impl<T> Drop for AlignedBuf<T> {
    fn drop(&mut self) {
        release(self.len * std::mem::size_of::<T>());
        // Safety: allocated in `zeroed` with this layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr() as *mut u8, self.layout) }
    }
}
