//! Counterfactual masking `Γ_b(x, S)`: zero one brand's impressions at every
//! exposure tuple outside the kept coalition `S`, leaving other brands alone.
//!
//! Views are lazy. The base tensor is never copied or mutated, so one tensor
//! can back any number of concurrently evaluated coalitions.

use std::borrow::Cow;

use crate::error::DataError;
use crate::types::{Cell, Dims, ExposureSet, ImpressionSource, ImpressionTensor, Tuple};

const NOT_FOCAL: u32 = u32::MAX;

/// A subset of exposure-set slots, stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Coalition {
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(slots: usize) -> Self {
        Coalition {
            words: vec![0; slots.div_ceil(64).max(1)],
        }
    }

    pub fn full(slots: usize) -> Self {
        let mut c = Coalition::empty(slots);
        for i in 0..slots {
            c.insert(i);
        }
        c
    }

    /// Coalition from the low bits of `mask` (for enumeration up to 64 slots).
    pub fn from_mask(slots: usize, mask: u64) -> Self {
        let mut c = Coalition::empty(slots);
        c.words[0] = mask;
        c
    }

    pub fn set_mask(&mut self, mask: u64) {
        self.words[0] = mask;
    }

    pub fn insert(&mut self, slot: usize) {
        self.words[slot / 64] |= 1 << (slot % 64);
    }

    pub fn remove(&mut self, slot: usize) {
        self.words[slot / 64] &= !(1 << (slot % 64));
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.words
            .get(slot / 64)
            .is_some_and(|w| w & (1 << (slot % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    pub fn is_subset(&self, other: &Coalition) -> bool {
        self.words
            .iter()
            .enumerate()
            .all(|(i, w)| w & !other.words.get(i).copied().unwrap_or(0) == 0)
    }
}

/// Maps each stored entry of a tensor to its slot in a brand's exposure set.
///
/// Built once per order; every coalition view of that order shares it.
#[derive(Debug, Clone)]
pub struct FocalIndex {
    brand: u32,
    exposure: ExposureSet,
    slots: Vec<u32>,
}

impl FocalIndex {
    /// Indexes `brand`'s exposure tuples on days `..= last_day`. Focal-brand
    /// entries after `last_day` are treated like competitor entries.
    pub fn new(base: &ImpressionTensor, brand: u32, last_day: u32) -> Self {
        let exposure = base.exposure_set_until(brand, last_day);
        let slots = base
            .entries()
            .iter()
            .map(|(cell, _)| {
                if cell.brand == brand && cell.day <= last_day {
                    exposure
                        .index_of(cell.tuple())
                        .map_or(NOT_FOCAL, |i| i as u32)
                } else {
                    NOT_FOCAL
                }
            })
            .collect();
        FocalIndex {
            brand,
            exposure,
            slots,
        }
    }

    pub fn brand(&self) -> u32 {
        self.brand
    }

    pub fn exposure(&self) -> &ExposureSet {
        &self.exposure
    }

    pub fn view<'a>(&'a self, base: &'a ImpressionTensor, kept: &'a Coalition) -> MaskedView<'a> {
        debug_assert_eq!(base.nnz(), self.slots.len());
        MaskedView {
            base,
            brand: self.brand,
            slots: Cow::Borrowed(&self.slots),
            kept: Cow::Borrowed(kept),
        }
    }
}

/// `x^{(b,S)}`: the base tensor with brand `b` zeroed outside `S`.
#[derive(Debug, Clone)]
pub struct MaskedView<'a> {
    base: &'a ImpressionTensor,
    brand: u32,
    slots: Cow<'a, [u32]>,
    kept: Cow<'a, Coalition>,
}

impl<'a> MaskedView<'a> {
    pub fn brand(&self) -> u32 {
        self.brand
    }

    pub fn base(&self) -> &'a ImpressionTensor {
        self.base
    }

    #[inline]
    fn keeps(&self, entry: usize) -> bool {
        let slot = self.slots[entry];
        slot == NOT_FOCAL || self.kept.contains(slot as usize)
    }

    /// Eagerly builds the masked tensor.
    pub fn materialize(&self) -> ImpressionTensor {
        let mut entries = Vec::with_capacity(self.base.nnz());
        self.for_each_nonzero(&mut |cell, n| entries.push((cell, n)));
        ImpressionTensor::from_entries(self.base.dims(), entries)
            .expect("masked entries come from a valid tensor")
    }
}

impl ImpressionSource for MaskedView<'_> {
    fn dims(&self) -> Dims {
        self.base.dims()
    }

    fn count(&self, cell: Cell) -> u32 {
        match self.base.find(cell) {
            Some(i) if self.keeps(i) => self.base.entries()[i].1,
            _ => 0,
        }
    }

    fn for_each_nonzero(&self, f: &mut dyn FnMut(Cell, u32)) {
        for (i, &(cell, n)) in self.base.entries().iter().enumerate() {
            if self.keeps(i) {
                f(cell, n);
            }
        }
    }
}

/// Applies `Γ_brand(base, kept)`.
///
/// `kept` must be a subset of the brand's exposure set; a tuple the user
/// never saw for that brand is rejected with [`DataError::KeptNotSubset`].
pub fn mask<'a>(
    base: &'a ImpressionTensor,
    brand: u32,
    kept: &[Tuple],
) -> Result<MaskedView<'a>, DataError> {
    let last_day = base.dims().days - 1;
    let index = FocalIndex::new(base, brand, last_day);
    let mut coalition = Coalition::empty(index.exposure.cardinality());
    for &t in kept {
        match index.exposure.index_of(t) {
            Some(slot) => coalition.insert(slot),
            None => {
                return Err(DataError::KeptNotSubset {
                    brand,
                    position: t.position,
                    day: t.day,
                })
            }
        }
    }
    Ok(MaskedView {
        base,
        brand,
        slots: Cow::Owned(index.slots),
        kept: Cow::Owned(coalition),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The two-brand, three-position, three-day worked example (0-based here).
    fn worked_example() -> ImpressionTensor {
        let dims = Dims::new(2, 3, 3).unwrap();
        let dense = [0, 0, 0, 0, 0, 0, 4, 7, 0, 0, 0, 10, 4, 0, 0, 0, 0, 0];
        ImpressionTensor::from_dense(dims, &dense).unwrap()
    }

    #[test]
    fn worked_example_masks() {
        let x = worked_example();
        let s = [Tuple::new(0, 1)];
        let v = mask(&x, 0, &s).unwrap();
        assert_eq!(
            v.to_dense(),
            vec![0, 0, 0, 0, 0, 0, 4, 0, 0, 0, 0, 10, 0, 0, 0, 0, 0, 0]
        );
        let s2 = [Tuple::new(0, 1), Tuple::new(0, 2)];
        let v2 = mask(&x, 0, &s2).unwrap();
        assert_eq!(
            v2.to_dense(),
            vec![0, 0, 0, 0, 0, 0, 4, 0, 0, 0, 0, 10, 4, 0, 0, 0, 0, 0]
        );
        assert_eq!(v2.count(Cell::new(0, 1, 1)), 0);
        assert_eq!(v2.count(Cell::new(1, 2, 1)), 10);
    }

    #[test]
    fn full_and_empty_coalitions() {
        let x = worked_example();
        let full = x.exposure_set(0);
        assert_eq!(mask(&x, 0, full.tuples()).unwrap().to_dense(), x.to_dense());
        let none = mask(&x, 0, &[]).unwrap();
        let dense = none.to_dense();
        assert!(x
            .entries()
            .iter()
            .all(|(c, n)| dense[x.dims().dense_index(*c)] == if c.brand == 0 { 0 } else { *n }));
    }

    #[test]
    fn kept_must_be_exposed() {
        let x = worked_example();
        let err = mask(&x, 0, &[Tuple::new(2, 0)]).unwrap_err();
        assert_eq!(
            err,
            DataError::KeptNotSubset {
                brand: 0,
                position: 2,
                day: 0
            }
        );
    }

    #[test]
    fn coalition_bits() {
        let mut c = Coalition::empty(70);
        c.insert(3);
        c.insert(65);
        assert!(c.contains(65) && c.contains(3) && !c.contains(4));
        assert_eq!(c.len(), 2);
        assert!(c.is_subset(&Coalition::full(70)));
        c.remove(65);
        assert_eq!(c.len(), 1);
        assert!(!Coalition::full(70).is_subset(&c));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor() -> impl Strategy<Value = ImpressionTensor> {
            proptest::collection::vec(0u32..4, 3 * 4 * 5).prop_map(|dense| {
                ImpressionTensor::from_dense(Dims::new(3, 4, 5).unwrap(), &dense).unwrap()
            })
        }

        proptest! {
            #[test]
            fn competitor_invariance_monotonicity_idempotence(
                x in tensor(), brand in 0u32..3, bits in any::<u64>(), extra in any::<u64>(),
            ) {
                let n = x.exposure_set(brand);
                let pick = |m: u64| -> Vec<Tuple> {
                    n.tuples().iter().enumerate().filter(|(i, _)| m >> (i % 64) & 1 == 1).map(|(_, &t)| t).collect()
                };
                let small = pick(bits);
                let large = pick(bits | extra);
                let v1 = mask(&x, brand, &small).unwrap();
                let v2 = mask(&x, brand, &large).unwrap();
                for i in 0..x.dims().dense_len() {
                    let cell = x.dims().cell_at(i);
                    if cell.brand != brand {
                        prop_assert_eq!(v1.count(cell), x.count(cell));
                    } else {
                        prop_assert!(v1.count(cell) <= v2.count(cell));
                    }
                }
                let once = v1.materialize();
                let twice = mask(&once, brand, &small).unwrap().materialize();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
