//! Byte accounting for kernel-tensor materialisations in the forward path.
//!
//! Layers wrap every transient kernel tensor they build (modulated child
//! kernels, per-sample aggregated kernels, batch-expanded weight stacks) in a
//! [`KernelAlloc`] guard. The counters are thread-local so concurrent tests
//! do not perturb each other.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK_TRANSIENT: Cell<usize> = const { Cell::new(0) };
    static PEAK_LAYER: Cell<usize> = const { Cell::new(0) };
    static LAYER_PERSISTENT: Cell<usize> = const { Cell::new(0) };
}

/// RAII record of one live transient kernel tensor.
#[must_use]
pub struct KernelAlloc {
    bytes: usize,
}

impl KernelAlloc {
    pub fn new(bytes: usize) -> Self {
        let live = LIVE.with(|l| {
            let v = l.get() + bytes;
            l.set(v);
            v
        });
        PEAK_TRANSIENT.with(|p| p.set(p.get().max(live)));
        let layer = LAYER_PERSISTENT.with(Cell::get) + live;
        PEAK_LAYER.with(|p| p.set(p.get().max(layer)));
        Self { bytes }
    }

    pub fn f64s(count: usize) -> Self {
        Self::new(count * std::mem::size_of::<f64>())
    }
}

impl Drop for KernelAlloc {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - self.bytes));
    }
}

/// Marks the persistent kernel bytes a layer reads while it runs; the peak
/// per-layer figure is persistent + live transient.
pub struct LayerScope {
    prev: usize,
}

impl LayerScope {
    pub fn enter(persistent_bytes: usize) -> Self {
        let prev = LAYER_PERSISTENT.with(|p| p.replace(persistent_bytes));
        let live = LIVE.with(Cell::get);
        PEAK_LAYER.with(|p| p.set(p.get().max(persistent_bytes + live)));
        Self { prev }
    }
}

impl Drop for LayerScope {
    fn drop(&mut self) {
        LAYER_PERSISTENT.with(|p| p.set(self.prev));
    }
}

/// Peak counters since the last [`reset`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelPeaks {
    /// Largest amount of transient kernel bytes live at once.
    pub transient: usize,
    /// Largest persistent + transient kernel bytes seen inside one layer.
    pub layer: usize,
}

pub fn reset() {
    PEAK_TRANSIENT.with(|p| p.set(LIVE.with(Cell::get)));
    PEAK_LAYER.with(|p| p.set(0));
}

pub fn peaks() -> KernelPeaks {
    KernelPeaks { transient: PEAK_TRANSIENT.with(Cell::get), layer: PEAK_LAYER.with(Cell::get) }
}

/// Runs `f` with fresh counters and returns its peaks.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, KernelPeaks) {
    reset();
    let out = f();
    (out, peaks())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_allocations_track_peak() {
        let ((), peaks) = measure(|| {
            let _scope = LayerScope::enter(100);
            let a = KernelAlloc::new(40);
            {
                let _b = KernelAlloc::new(10);
            }
            drop(a);
            let _c = KernelAlloc::new(20);
        });
        assert_eq!(peaks.transient, 50);
        assert_eq!(peaks.layer, 150);
    }
}
