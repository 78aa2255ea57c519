//! Deterministic emulation of a 32-lane warp and the warp-level primitives
//! (`match_any`, `ballot`, `shfl`, `shfl_down`, `ffs`, `popc`) that the
//! reduction routines are written against.
//!
//! Every primitive is a pure function over value types. Lane 0 is the lowest
//! lane and corresponds to bit 0 of a [`LaneMask`].

use std::fmt;
use std::ops::{BitAnd, BitAndAssign, BitOr, BitOrAssign, Not};

use serde::{Deserialize, Serialize};

/// Number of lanes in a warp. Fixed; there is no configurable width.
pub const WARP_SIZE: usize = 32;

/// 32-bit mask over warp lanes. Bit `i` set means lane `i` participates.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneMask(pub u32);

impl LaneMask {
    pub const EMPTY: LaneMask = LaneMask(0);
    pub const FULL: LaneMask = LaneMask(u32::MAX);

    #[inline]
    pub const fn bits(self) -> u32 {
        self.0
    }

    #[inline]
    pub const fn lane(lane: usize) -> LaneMask {
        LaneMask(1 << lane)
    }

    /// Mask with the lowest `n` lanes set.
    pub const fn lowest(n: usize) -> LaneMask {
        if n >= WARP_SIZE {
            LaneMask::FULL
        } else {
            LaneMask((1u32 << n) - 1)
        }
    }

    #[inline]
    pub const fn contains(self, lane: usize) -> bool {
        lane < WARP_SIZE && (self.0 >> lane) & 1 == 1
    }

    #[inline]
    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn count(self) -> u32 {
        popc(self)
    }

    #[inline]
    pub fn with(self, lane: usize) -> LaneMask {
        LaneMask(self.0 | (1 << lane))
    }

    #[inline]
    pub fn without(self, lane: usize) -> LaneMask {
        LaneMask(self.0 & !(1 << lane))
    }

    /// Lowest set lane, if any.
    #[inline]
    pub fn leader(self) -> Option<usize> {
        match ffs(self) {
            0 => None,
            pos => Some(pos as usize - 1),
        }
    }

    /// Set lanes in ascending order.
    pub fn lanes(self) -> Lanes {
        Lanes(self.0)
    }
}

impl fmt::Debug for LaneMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LaneMask({:#010x})", self.0)
    }
}

impl fmt::LowerHex for LaneMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl BitAnd for LaneMask {
    type Output = LaneMask;
    fn bitand(self, rhs: LaneMask) -> LaneMask {
        LaneMask(self.0 & rhs.0)
    }
}

impl BitAndAssign for LaneMask {
    fn bitand_assign(&mut self, rhs: LaneMask) {
        self.0 &= rhs.0;
    }
}

impl BitOr for LaneMask {
    type Output = LaneMask;
    fn bitor(self, rhs: LaneMask) -> LaneMask {
        LaneMask(self.0 | rhs.0)
    }
}

impl BitOrAssign for LaneMask {
    fn bitor_assign(&mut self, rhs: LaneMask) {
        self.0 |= rhs.0;
    }
}

impl Not for LaneMask {
    type Output = LaneMask;
    fn not(self) -> LaneMask {
        LaneMask(!self.0)
    }
}

/// Iterator over the set lanes of a mask, lowest first.
#[derive(Clone, Debug)]
pub struct Lanes(u32);

impl Iterator for Lanes {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let lane = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(lane)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.0.count_ones() as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Lanes {}

/// 1-based position of the lowest set bit, 0 for an empty mask, so that
/// `ffs(m) - 1` names the leader lane.
#[inline]
pub fn ffs(mask: LaneMask) -> u32 {
    if mask.0 == 0 {
        0
    } else {
        mask.0.trailing_zeros() + 1
    }
}

#[inline]
pub fn popc(mask: LaneMask) -> u32 {
    mask.0.count_ones()
}

/// Register contents of one lane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneRegs {
    pub primitive: u32,
    pub grads: Vec<f64>,
}

/// A warp: the active mask plus 32 lane register slots.
///
/// Lanes outside `active` still hold register contents; primitives never
/// read them unless an algorithm re-activates them explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpState {
    pub active: LaneMask,
    pub lanes: Vec<LaneRegs>,
}

impl WarpState {
    /// A warp whose lanes all hold primitive 0 and `params` zero gradients.
    pub fn new(active: LaneMask, params: usize) -> Self {
        WarpState {
            active,
            lanes: vec![
                LaneRegs {
                    primitive: 0,
                    grads: vec![0.0; params],
                };
                WARP_SIZE
            ],
        }
    }

    pub fn with_active(active: LaneMask) -> Self {
        WarpState::new(active, 0)
    }

    /// For each active lane `i`, the mask of active lanes `j` whose key equals
    /// `keys[i]`. Inactive lanes receive the empty mask.
    pub fn match_any(&self, keys: &[u32; WARP_SIZE]) -> [LaneMask; WARP_SIZE] {
        let mut out = [LaneMask::EMPTY; WARP_SIZE];
        let mut remaining = self.active;
        while let Some(lead) = remaining.leader() {
            let key = keys[lead];
            let group = remaining
                .lanes()
                .filter(|&j| keys[j] == key)
                .fold(LaneMask::EMPTY, LaneMask::with);
            for lane in group.lanes() {
                out[lane] = group;
            }
            remaining &= !group;
        }
        out
    }

    /// Bit `i` set iff lane `i` is active and `predicate[i]` holds.
    pub fn ballot(&self, predicate: &[bool; WARP_SIZE]) -> LaneMask {
        self.active
            .lanes()
            .filter(|&i| predicate[i])
            .fold(LaneMask::EMPTY, LaneMask::with)
    }

    /// `result[i] = values[src[i]]`, regardless of whether `src[i]` is active.
    pub fn shuffle(&self, values: &[f64; WARP_SIZE], src: &[usize; WARP_SIZE]) -> [f64; WARP_SIZE] {
        std::array::from_fn(|i| values[src[i]])
    }

    /// `result[i] = values[i + offset]` when in range, else the lane's own value.
    pub fn shuffle_down(&self, values: &[f64; WARP_SIZE], offset: usize) -> [f64; WARP_SIZE] {
        std::array::from_fn(|i| match i.checked_add(offset) {
            Some(src) if src < WARP_SIZE => values[src],
            _ => values[i],
        })
    }
}
