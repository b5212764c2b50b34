//! Incrementality-based multi-touch attribution.
//!
//! A response model predicts purchase probability from a user's impression
//! tensor. Each order's incremental probability is split across the brand's
//! `(position, day)` ad tuples by Shapley value, exactly for small exposure
//! sets and by permutation sampling otherwise, and the per-order credits are
//! reduced into per-brand position shares.

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod ingest;
pub mod masking;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod response;
pub mod seed;
pub mod shapley;
pub mod types;

pub use dataset::{ClickRecord, Dataset, UserRecord};
pub use error::{DataError, IngestError, ModelError, PipelineError, ShapleyError};
pub use masking::{mask, Coalition, FocalIndex, MaskedView};
pub use response::{AnyModel, ModelShape, ResponseModel};
pub use shapley::{
    attribute_order, Method, OrderAttribution, OrderContext, ShapleyConfig, Strategy,
};
pub use types::{
    AttributionReport, BrandReport, Cell, Dims, ExposureSet, ImpressionSource, ImpressionTensor,
    Order, PositionRow, PriceSeries, Tuple, TupleCredit, UserFeatures, UserId,
};
