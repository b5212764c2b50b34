//! Shared domain types: dimensions, sparse per-user impression tensors,
//! price series, user features, orders and exposure sets.
//!
//! Days are 0-based everywhere in the crate; the attribution day of a
//! `T`-day window is `T - 1`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub type UserId = u64;

/// Dataset extents: `B` brands, `K` ad-positions, `T` days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub brands: u32,
    pub positions: u32,
    pub days: u32,
}

impl Dims {
    pub fn new(brands: u32, positions: u32, days: u32) -> Result<Self, DataError> {
        if brands == 0 {
            return Err(DataError::EmptyDimension("brands"));
        }
        if positions == 0 {
            return Err(DataError::EmptyDimension("positions"));
        }
        if days == 0 {
            return Err(DataError::EmptyDimension("days"));
        }
        Ok(Dims {
            brands,
            positions,
            days,
        })
    }

    /// Number of cells in the dense `B·K·T` view.
    pub fn dense_len(&self) -> usize {
        self.brands as usize * self.positions as usize * self.days as usize
    }

    /// Dense offset of a cell: day-major, then brand, then position.
    pub fn dense_index(&self, cell: Cell) -> usize {
        ((cell.day as usize * self.brands as usize) + cell.brand as usize) * self.positions as usize
            + cell.position as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        let k = self.positions as usize;
        let b = self.brands as usize;
        Cell {
            day: (index / (k * b)) as u32,
            brand: ((index / k) % b) as u32,
            position: (index % k) as u32,
        }
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.brand < self.brands && cell.position < self.positions && cell.day < self.days
    }

    pub(crate) fn check(&self, cell: Cell) -> Result<(), DataError> {
        if cell.brand >= self.brands {
            return Err(DataError::OutOfRange {
                what: "brand_id",
                value: cell.brand as u64,
                limit: self.brands as u64,
            });
        }
        if cell.position >= self.positions {
            return Err(DataError::OutOfRange {
                what: "position_id",
                value: cell.position as u64,
                limit: self.positions as u64,
            });
        }
        if cell.day >= self.days {
            return Err(DataError::OutOfRange {
                what: "day",
                value: cell.day as u64,
                limit: self.days as u64,
            });
        }
        Ok(())
    }
}

/// One `(brand, position, day)` coordinate. Ordering matches the dense layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub day: u32,
    pub brand: u32,
    pub position: u32,
}

impl Cell {
    pub fn new(brand: u32, position: u32, day: u32) -> Self {
        Cell {
            day,
            brand,
            position,
        }
    }

    pub fn tuple(&self) -> Tuple {
        Tuple::new(self.position, self.day)
    }
}

/// An ad-position-day pair `(k, t)`; the unit that receives Shapley credit.
///
/// Ordered by ascending day, then position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tuple {
    pub position: u32,
    pub day: u32,
}

impl Tuple {
    pub fn new(position: u32, day: u32) -> Self {
        Tuple { position, day }
    }
}

impl Ord for Tuple {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.day, self.position).cmp(&(other.day, other.position))
    }
}

impl PartialOrd for Tuple {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Tuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.position, self.day)
    }
}

/// Read access to impression counts. Implemented by the plain tensor and by
/// counterfactual views over it, so response models accept either.
pub trait ImpressionSource {
    fn dims(&self) -> Dims;

    fn count(&self, cell: Cell) -> u32;

    /// Visits every cell with a positive count in dense order.
    fn for_each_nonzero(&self, f: &mut dyn FnMut(Cell, u32));

    fn to_dense(&self) -> Vec<u32> {
        let dims = self.dims();
        let mut dense = vec![0; dims.dense_len()];
        self.for_each_nonzero(&mut |cell, n| dense[dims.dense_index(cell)] = n);
        dense
    }
}

/// Sparse impression counts `x_{ibkt}` for a single user.
///
/// Entries are kept sorted in dense order; absent cells are zero and stored
/// counts are always positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpressionTensor {
    dims: Dims,
    entries: Vec<(Cell, u32)>,
}

impl ImpressionTensor {
    pub fn empty(dims: Dims) -> Self {
        ImpressionTensor {
            dims,
            entries: Vec::new(),
        }
    }

    /// Builds a tensor from `(cell, count)` pairs in any order. Zero counts are
    /// dropped; repeated cells are an error.
    pub fn from_entries<I>(dims: Dims, entries: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (Cell, u32)>,
    {
        let mut entries: Vec<(Cell, u32)> = entries.into_iter().filter(|&(_, n)| n > 0).collect();
        for &(cell, _) in &entries {
            dims.check(cell)?;
        }
        entries.sort_unstable_by_key(|&(cell, _)| cell);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            let c = w[0].0;
            return Err(DataError::DuplicateCell {
                brand: c.brand,
                position: c.position,
                day: c.day,
            });
        }
        Ok(ImpressionTensor { dims, entries })
    }

    pub fn from_dense(dims: Dims, dense: &[u32]) -> Result<Self, DataError> {
        if dense.len() != dims.dense_len() {
            return Err(DataError::OutOfRange {
                what: "dense length",
                value: dense.len() as u64,
                limit: dims.dense_len() as u64,
            });
        }
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(i, &n)| (dims.cell_at(i), n))
            .collect();
        Ok(ImpressionTensor { dims, entries })
    }

    pub fn entries(&self) -> &[(Cell, u32)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub(crate) fn find(&self, cell: Cell) -> Option<usize> {
        self.entries.binary_search_by_key(&cell, |&(c, _)| c).ok()
    }

    /// The exposure set `N_{ibT}` for `brand`: every `(position, day)` with a
    /// positive count, ascending by day then position.
    pub fn exposure_set(&self, brand: u32) -> ExposureSet {
        ExposureSet::from_sorted(
            self.entries
                .iter()
                .filter(|(c, _)| c.brand == brand)
                .map(|(c, _)| c.tuple())
                .collect(),
        )
    }

    /// Exposure set restricted to days up to and including `last_day`.
    pub fn exposure_set_until(&self, brand: u32, last_day: u32) -> ExposureSet {
        ExposureSet::from_sorted(
            self.entries
                .iter()
                .filter(|(c, _)| c.brand == brand && c.day <= last_day)
                .map(|(c, _)| c.tuple())
                .collect(),
        )
    }

    /// Total impressions `n_{ibt} = Σ_k x_{ibkt}` of one brand on one day.
    pub fn brand_day_total(&self, brand: u32, day: u32) -> u64 {
        self.entries
            .iter()
            .filter(|(c, _)| c.brand == brand && c.day == day)
            .map(|&(_, n)| n as u64)
            .sum()
    }

    pub fn brand_total(&self, brand: u32) -> u64 {
        self.entries
            .iter()
            .filter(|(c, _)| c.brand == brand)
            .map(|&(_, n)| n as u64)
            .sum()
    }
}

impl ImpressionSource for ImpressionTensor {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn count(&self, cell: Cell) -> u32 {
        self.find(cell).map_or(0, |i| self.entries[i].1)
    }

    fn for_each_nonzero(&self, f: &mut dyn FnMut(Cell, u32)) {
        for &(cell, n) in &self.entries {
            f(cell, n);
        }
    }
}

/// Price index `p_{bt}` for every brand and day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    brands: u32,
    days: u32,
    values: Vec<f64>,
}

impl PriceSeries {
    /// `values` are laid out day-major: `values[t * B + b]`.
    pub fn new(brands: u32, days: u32, values: Vec<f64>) -> Result<Self, DataError> {
        if values.len() != brands as usize * days as usize {
            return Err(DataError::OutOfRange {
                what: "price series length",
                value: values.len() as u64,
                limit: brands as u64 * days as u64,
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::InvalidValue("price index"));
        }
        Ok(PriceSeries {
            brands,
            days,
            values,
        })
    }

    pub fn constant(brands: u32, days: u32, value: f64) -> Self {
        PriceSeries {
            brands,
            days,
            values: vec![value; brands as usize * days as usize],
        }
    }

    pub fn brands(&self) -> u32 {
        self.brands
    }

    pub fn days(&self) -> u32 {
        self.days
    }

    pub fn get(&self, brand: u32, day: u32) -> f64 {
        self.values[day as usize * self.brands as usize + brand as usize]
    }

    /// All brands' prices on one day, `p_t`.
    pub fn day(&self, day: u32) -> &[f64] {
        let b = self.brands as usize;
        &self.values[day as usize * b..(day as usize + 1) * b]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Baseline user characteristics `d_i` (length `R`, fixed per dataset).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UserFeatures(Vec<f64>);

impl UserFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self, DataError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidValue("user features"));
        }
        Ok(UserFeatures(values))
    }

    pub fn zeros(len: usize) -> Self {
        UserFeatures(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// An observed purchase `o(i, b, t)`; orders always carry `Y = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Order {
    pub user_id: UserId,
    pub brand: u32,
    pub day: u32,
}

/// The tuple set `N_{ibT}` of one order: distinct `(position, day)` pairs with
/// own-brand exposure, ascending by day then position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExposureSet {
    tuples: Vec<Tuple>,
}

impl ExposureSet {
    fn from_sorted(tuples: Vec<Tuple>) -> Self {
        debug_assert!(tuples.windows(2).all(|w| w[0] < w[1]));
        ExposureSet { tuples }
    }

    /// Canonicalizes an arbitrary list (sorts, drops duplicates).
    pub fn from_tuples(mut tuples: Vec<Tuple>) -> Self {
        tuples.sort_unstable();
        tuples.dedup();
        ExposureSet { tuples }
    }

    pub fn tuples(&self) -> &[Tuple] {
        &self.tuples
    }

    /// `|N_{ibT}|`
    pub fn cardinality(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn index_of(&self, tuple: Tuple) -> Option<usize> {
        self.tuples.binary_search(&tuple).ok()
    }

    /// The positions set `A_{ibT}`.
    pub fn positions(&self) -> BTreeSet<u32> {
        self.tuples.iter().map(|t| t.position).collect()
    }
}

/// Shapley credit per exposure tuple, aligned with the exposure set order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TupleCredit {
    entries: Vec<(Tuple, f64)>,
}

impl TupleCredit {
    pub fn new(entries: Vec<(Tuple, f64)>) -> Self {
        TupleCredit { entries }
    }

    pub(crate) fn from_values(exposure: &ExposureSet, values: Vec<f64>) -> Self {
        debug_assert_eq!(exposure.cardinality(), values.len());
        TupleCredit {
            entries: exposure.tuples().iter().copied().zip(values).collect(),
        }
    }

    pub fn get(&self, tuple: Tuple) -> Option<f64> {
        self.entries
            .iter()
            .find(|(t, _)| *t == tuple)
            .map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tuple, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values().sum()
    }
}

/// One `(brand, position)` line of an attribution report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub brand: u32,
    pub position: u32,
    /// Summed incremental credit `SA_k`.
    pub sa: f64,
    /// Share `Ψ_{bkT}` of the brand's total credit.
    pub psi: f64,
    /// Number of orders whose exposure set contains this position.
    pub order_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrandReport {
    pub brand: u32,
    pub total_sa: f64,
    pub orders: u64,
    /// Set when the brand's credits sum to zero and every `psi` is reported as 0.
    pub zero_credit: bool,
    pub rows: Vec<PositionRow>,
}

/// Brand-level position shares for one attribution day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub day: u32,
    pub orders: u64,
    pub brands: Vec<BrandReport>,
}

impl AttributionReport {
    pub fn rows(&self) -> impl Iterator<Item = &PositionRow> {
        self.brands.iter().flat_map(|b| b.rows.iter())
    }
}
