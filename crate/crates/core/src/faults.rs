//! Fault-injection hooks used to prove the `verify` oracles can fail.
//!
//! Faults are thread-local so that an injected fault never leaks into
//! unrelated work running on other threads (parallel tests, in particular).

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Token-wise argmax keeps the *last* of tied candidates.
    FilipTiebreak,
    /// Right-operand gradient of matmul is scaled by 1.01.
    MatmulGrad,
    /// The text-side CLIP term reuses the image-side logits.
    ClipSymmetry,
    /// Corpus caption-length std uses the sample (n - 1) denominator.
    CorpusStd,
}

impl Fault {
    pub const ALL: [Fault; 4] = [
        Fault::FilipTiebreak,
        Fault::MatmulGrad,
        Fault::ClipSymmetry,
        Fault::CorpusStd,
    ];

    fn bit(self) -> u32 {
        1 << self as u32
    }

    /// Command-line flag that activates this fault in `verify`.
    pub fn flag(self) -> &'static str {
        match self {
            Fault::FilipTiebreak => "break-filip-tiebreak",
            Fault::MatmulGrad => "break-matmul-grad",
            Fault::ClipSymmetry => "break-clip-symmetry",
            Fault::CorpusStd => "break-corpus-std",
        }
    }
}

thread_local! {
    static ACTIVE: Cell<u32> = const { Cell::new(0) };
}

pub fn is_active(fault: Fault) -> bool {
    ACTIVE.with(|a| a.get() & fault.bit() != 0)
}

/// Runs `f` with the given faults active on the current thread, restoring
/// the previous set afterwards.
pub fn with_faults<R>(faults: &[Fault], f: impl FnOnce() -> R) -> R {
    let mask = faults.iter().fold(0, |m, f| m | f.bit());
    let previous = ACTIVE.with(|a| a.replace(mask));
    struct Restore(u32);
    impl Drop for Restore {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }
    let _restore = Restore(previous);
    f()
}
