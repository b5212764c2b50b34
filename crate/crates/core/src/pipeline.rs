//! Attribution over every order of one day: a parallel map computing each
//! order's position credits, then a keyed reduce into per-brand shares.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClickRecord, Dataset};
use crate::error::{IngestError, PipelineError, ShapleyError};
use crate::metrics::{compensated_sum, CompensatedSum};
use crate::par;
use crate::response::ResponseModel;
use crate::shapley::{
    attribute_order, Method, OrderAttribution, OrderContext, ShapleyConfig, Strategy,
};
use crate::types::{
    AttributionReport, BrandReport, Cell, Dims, ImpressionTensor, Order, PositionRow, PriceSeries,
    Tuple, UserFeatures, UserId,
};

pub const REPORT_FILE: &str = "attribution.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const ORDERS_FILE: &str = "orders.csv";
pub const CREDITS_FILE: &str = "tuple_credits.csv";
pub const DELTA_HISTOGRAM_FILE: &str = "delta_ratio_histogram.csv";
pub const ECDF_FILE: &str = "shapley_ecdf.csv";
pub const POSITION_MEAN_FILE: &str = "position_mean_shapley.csv";

const REPORT_HEADER: &str = "brand_id,position_id,sa,psi,order_count";
const ORDERS_HEADER: &str =
    "user_id,brand_id,day,tuples,method,status,sigma_full,sigma_empty,delta,raw_sum";
const CREDITS_HEADER: &str = "user_id,brand_id,order_day,position_id,day,credit";
const HISTOGRAM_BINS: usize = 20;

pub struct AttributionJob<'a> {
    pub dataset: &'a Dataset,
    pub model: &'a dyn ResponseModel,
    pub shapley: ShapleyConfig,
    pub workers: usize,
    /// Attribution day; the last day of the window when `None`.
    pub day: Option<u32>,
}

impl AttributionJob<'_> {
    pub fn day(&self) -> u32 {
        self.day.unwrap_or(self.dataset.dims.days - 1)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.workers == 0 {
            return Err(PipelineError::InvalidJob(
                "worker count must be at least 1".into(),
            ));
        }
        if self.day() >= self.dataset.dims.days {
            return Err(PipelineError::InvalidJob(format!(
                "day {} outside window of {} days",
                self.day(),
                self.dataset.dims.days
            )));
        }
        let shape = self.model.shape();
        if shape.dims() != self.dataset.dims || shape.features as usize != self.dataset.feature_len
        {
            return Err(PipelineError::InvalidJob(format!(
                "model expects {:?} with {} user features, data has {:?} with {}",
                shape.dims(),
                shape.features,
                self.dataset.dims,
                self.dataset.feature_len
            )));
        }
        self.shapley.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStatus {
    Attributed,
    /// The brand showed the user no ads up to the order day.
    NoExposure,
    /// Credits summed to zero while `Δ` did not; the order is left out.
    Skipped,
}

impl OrderStatus {
    fn as_str(self) -> &'static str {
        match self {
            OrderStatus::Attributed => "attributed",
            OrderStatus::NoExposure => "no_exposure",
            OrderStatus::Skipped => "skipped",
        }
    }
}

/// Per-order output of the map phase.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderOutcome {
    pub order: Order,
    pub status: OrderStatus,
    pub tuples: usize,
    pub method: Option<Method>,
    pub sigma_full: f64,
    pub sigma_empty: f64,
    pub delta: f64,
    pub raw_sum: f64,
    pub tuple_credits: Vec<(Tuple, f64)>,
    pub position_credits: BTreeMap<u32, f64>,
}

impl OrderOutcome {
    fn from_attribution(order: Order, a: OrderAttribution) -> Self {
        OrderOutcome {
            order,
            status: if a.method.is_some() {
                OrderStatus::Attributed
            } else {
                OrderStatus::NoExposure
            },
            tuples: a.tuple_credits.len(),
            method: a.method,
            sigma_full: a.sigma_full,
            sigma_empty: a.sigma_empty,
            delta: a.delta,
            raw_sum: a.raw_sum,
            tuple_credits: a.tuple_credits.iter().collect(),
            position_credits: a.position_credits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub day: u32,
    pub orders: u64,
    pub attributed: u64,
    pub no_exposure: u64,
    pub skipped: u64,
    pub exact_orders: u64,
    pub approximate_orders: u64,
    /// `Σ Δ` over attributed orders.
    pub total_delta: f64,
    /// `Σ Δ` over skipped orders.
    pub skipped_delta: f64,
    /// `Σ SA_k` over all brands and positions.
    pub total_sa: f64,
    pub shapley: ShapleyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub workers: usize,
    pub parallel_backend: bool,
    pub map_seconds: f64,
    pub reduce_seconds: f64,
    pub orders_per_minute: f64,
}

#[derive(Debug, Clone)]
pub struct AttributionRun {
    pub report: AttributionReport,
    pub summary: RunSummary,
    pub outcomes: Vec<OrderOutcome>,
    pub timing: Timing,
}

/// Runs the map phase over every order placed on the job's day and reduces
/// the credits into an [`AttributionReport`].
pub fn run_attribution(job: &AttributionJob<'_>) -> Result<AttributionRun, PipelineError> {
    job.validate()?;
    let day = job.day();
    let orders = job.dataset.orders_on(day);
    for o in &orders {
        if job.dataset.user(o.user_id).is_none() {
            return Err(PipelineError::InvalidJob(format!(
                "order {o:?} names an unknown user"
            )));
        }
    }

    let start = Instant::now();
    let mapped = par::map_ordered(&orders, job.workers, |order| {
        let user = job.dataset.user(order.user_id).expect("checked above");
        let ctx = OrderContext::new(
            &user.impressions,
            &job.dataset.prices,
            &user.features,
            order.brand,
            day,
        );
        map_order(job.model, &ctx, order, &job.shapley)
    });
    let map_seconds = start.elapsed().as_secs_f64();
    let outcomes = mapped.into_iter().collect::<Result<Vec<_>, _>>()?;

    let start = Instant::now();
    let (report, summary) = reduce(day, job.dataset.dims, &outcomes, &job.shapley);
    let reduce_seconds = start.elapsed().as_secs_f64();
    let total = map_seconds + reduce_seconds;
    Ok(AttributionRun {
        report,
        summary,
        outcomes,
        timing: Timing {
            workers: job.workers,
            parallel_backend: par::PARALLEL,
            map_seconds,
            reduce_seconds,
            orders_per_minute: if total > 0.0 {
                orders.len() as f64 * 60.0 / total
            } else {
                0.0
            },
        },
    })
}

fn map_order(
    model: &dyn ResponseModel,
    ctx: &OrderContext<'_>,
    order: &Order,
    config: &ShapleyConfig,
) -> Result<OrderOutcome, PipelineError> {
    match attribute_order(model, ctx, order, config) {
        Ok(a) => Ok(OrderOutcome::from_attribution(*order, a)),
        Err(ShapleyError::DegenerateAllocation { delta }) => {
            log::warn!("order {order:?}: credits sum to zero but delta is {delta}; skipped");
            let sigma_full = ctx.sigma(model, &ctx.full_coalition())?;
            let sigma_empty = ctx.sigma(model, &ctx.empty_coalition())?;
            Ok(OrderOutcome {
                order: *order,
                status: OrderStatus::Skipped,
                tuples: ctx.len(),
                method: None,
                sigma_full,
                sigma_empty,
                delta,
                raw_sum: 0.0,
                tuple_credits: Vec::new(),
                position_credits: BTreeMap::new(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Reduce phase: compensated per-`(brand, position)` sums, then shares.
pub fn reduce(
    day: u32,
    dims: Dims,
    outcomes: &[OrderOutcome],
    shapley: &ShapleyConfig,
) -> (AttributionReport, RunSummary) {
    let mut cells: BTreeMap<(u32, u32), (CompensatedSum, u64)> = BTreeMap::new();
    let mut brand_orders = vec![0u64; dims.brands as usize];
    let mut total_delta = CompensatedSum::default();
    let mut skipped_delta = CompensatedSum::default();
    let mut summary = RunSummary {
        day,
        orders: outcomes.len() as u64,
        attributed: 0,
        no_exposure: 0,
        skipped: 0,
        exact_orders: 0,
        approximate_orders: 0,
        total_delta: 0.0,
        skipped_delta: 0.0,
        total_sa: 0.0,
        shapley: shapley.clone(),
    };
    for o in outcomes {
        brand_orders[o.order.brand as usize] += 1;
        match o.status {
            OrderStatus::Skipped => {
                summary.skipped += 1;
                skipped_delta.add(o.delta);
                continue;
            }
            OrderStatus::NoExposure => summary.no_exposure += 1,
            OrderStatus::Attributed => summary.attributed += 1,
        }
        match o.method {
            Some(Method::Exact) => summary.exact_orders += 1,
            Some(Method::Approximate) => summary.approximate_orders += 1,
            None => {}
        }
        // an order without exposure has Δ = 0 and no credits
        total_delta.add(o.delta);
        for (&k, &v) in &o.position_credits {
            let e = cells.entry((o.order.brand, k)).or_default();
            e.0.add(v);
            e.1 += 1;
        }
    }

    let mut brands = Vec::new();
    let mut total_sa = CompensatedSum::default();
    for b in 0..dims.brands {
        if brand_orders[b as usize] == 0 {
            continue;
        }
        let rows: Vec<(u32, f64, u64)> = cells
            .range((b, 0)..=(b, u32::MAX))
            .map(|(&(_, k), (s, n))| (k, s.value(), *n))
            .collect();
        let brand_sa = compensated_sum(rows.iter().map(|r| r.1));
        total_sa.add(brand_sa);
        let zero_credit = brand_sa == 0.0;
        brands.push(BrandReport {
            brand: b,
            total_sa: brand_sa,
            orders: brand_orders[b as usize],
            zero_credit,
            rows: rows
                .into_iter()
                .map(|(k, sa, n)| PositionRow {
                    brand: b,
                    position: k,
                    sa,
                    psi: if zero_credit { 0.0 } else { sa / brand_sa },
                    order_count: n,
                })
                .collect(),
        });
    }
    summary.total_delta = total_delta.value();
    summary.skipped_delta = skipped_delta.value();
    summary.total_sa = total_sa.value();
    (
        AttributionReport {
            day,
            orders: outcomes.len() as u64,
            brands,
        },
        summary,
    )
}

fn create(path: &Path) -> Result<BufWriter<File>, IngestError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IngestError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IngestError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    fs::write(path, text + "\n").map_err(|e| IngestError::io(path, e))
}

/// Writes the position report, the deterministic summary, per-order records
/// and tuple credits, and the timing file.
pub fn write_run(run: &AttributionRun, dir: &Path) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e| IngestError::io(&path, e)
    };

    let path = dir.join(REPORT_FILE);
    let mut w = create(&path)?;
    writeln!(w, "{REPORT_HEADER}").map_err(io(&path))?;
    for r in run.report.rows() {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.brand, r.position, r.sa, r.psi, r.order_count
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join(ORDERS_FILE);
    let mut w = create(&path)?;
    writeln!(w, "{ORDERS_HEADER}").map_err(io(&path))?;
    for o in &run.outcomes {
        let method = match o.method {
            Some(Method::Exact) => "exact",
            Some(Method::Approximate) => "approximate",
            None => "none",
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            o.order.user_id,
            o.order.brand,
            o.order.day,
            o.tuples,
            method,
            o.status.as_str(),
            o.sigma_full,
            o.sigma_empty,
            o.delta,
            o.raw_sum
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join(CREDITS_FILE);
    let mut w = create(&path)?;
    writeln!(w, "{CREDITS_HEADER}").map_err(io(&path))?;
    for o in &run.outcomes {
        for (t, v) in &o.tuple_credits {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                o.order.user_id, o.order.brand, o.order.day, t.position, t.day, v
            )
            .map_err(io(&path))?;
        }
    }
    w.flush().map_err(io(&path))?;

    write_json(&dir.join(SUMMARY_FILE), &run.summary)?;
    write_json(&dir.join(TIMING_FILE), &run.timing)
}

/// One row of `orders.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub user_id: UserId,
    pub brand_id: u32,
    pub day: u32,
    pub tuples: usize,
    pub method: String,
    pub status: OrderStatus,
    pub sigma_full: f64,
    pub sigma_empty: f64,
    pub delta: f64,
    pub raw_sum: f64,
}

/// One row of `tuple_credits.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditRow {
    pub user_id: UserId,
    pub brand_id: u32,
    pub order_day: u32,
    pub position_id: u32,
    pub day: u32,
    pub credit: f64,
}

/// One row of `attribution.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub brand_id: u32,
    pub position_id: u32,
    pub sa: f64,
    pub psi: f64,
    pub order_count: u64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(
    path: &Path,
    header: &str,
) -> Result<Vec<T>, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| IngestError::parse(path, 1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != header {
        return Err(IngestError::parse(
            path,
            1,
            format!("expected header `{header}`, found `{found}`"),
        ));
    }
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| {
                let line = e.position().map_or(0, |p| p.line());
                IngestError::parse(path, line, e.to_string())
            })
        })
        .collect()
}

/// Outputs of a previous [`write_run`], read back from disk.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub rows: Vec<ReportRow>,
    pub orders: Vec<OrderRow>,
    pub credits: Vec<CreditRow>,
    pub summary: RunSummary,
}

pub fn read_run(dir: &Path) -> Result<StoredRun, IngestError> {
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| IngestError::io(&summary_path, e))?;
    let summary = serde_json::from_str(&text).map_err(|e| IngestError::Format {
        path: summary_path,
        message: e.to_string(),
    })?;
    Ok(StoredRun {
        rows: read_csv(&dir.join(REPORT_FILE), REPORT_HEADER)?,
        orders: read_csv(&dir.join(ORDERS_FILE), ORDERS_HEADER)?,
        credits: read_csv(&dir.join(CREDITS_FILE), CREDITS_HEADER)?,
        summary,
    })
}

/// Result of [`validate_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunCheck {
    /// Largest `|Σ_k Ψ − 1|` over brands with credit.
    pub max_share_error: f64,
    /// `|Σ SA_k − Σ Δ|` over attributed orders.
    pub conservation_error: f64,
    pub credited_brands: usize,
}

/// Checks a stored run for schema problems and for the share and
/// conservation invariants.
pub fn validate_run(run: &StoredRun) -> Result<RunCheck, String> {
    let mut seen = std::collections::HashSet::new();
    let mut by_brand: BTreeMap<u32, Vec<&ReportRow>> = BTreeMap::new();
    for r in &run.rows {
        if !seen.insert((r.brand_id, r.position_id)) {
            return Err(format!(
                "duplicate row for brand {} position {}",
                r.brand_id, r.position_id
            ));
        }
        if !r.sa.is_finite() || !r.psi.is_finite() {
            return Err(format!(
                "non-finite value for brand {} position {}",
                r.brand_id, r.position_id
            ));
        }
        by_brand.entry(r.brand_id).or_default().push(r);
    }
    let mut max_share_error: f64 = 0.0;
    let mut credited = 0;
    for rows in by_brand.values() {
        let total = compensated_sum(rows.iter().map(|r| r.sa));
        if total == 0.0 {
            continue;
        }
        credited += 1;
        let shares = compensated_sum(rows.iter().map(|r| r.psi));
        max_share_error = max_share_error.max((shares - 1.0).abs());
    }
    let total_sa = compensated_sum(run.rows.iter().map(|r| r.sa));
    let total_delta = compensated_sum(
        run.orders
            .iter()
            .filter(|o| o.status != OrderStatus::Skipped)
            .map(|o| o.delta),
    );
    if run.orders.len() as u64 != run.summary.orders {
        return Err(format!(
            "summary counts {} orders, orders file has {}",
            run.summary.orders,
            run.orders.len()
        ));
    }
    for o in &run.orders {
        if !["exact", "approximate", "none"].contains(&o.method.as_str()) {
            return Err(format!("unknown method `{}`", o.method));
        }
    }
    Ok(RunCheck {
        max_share_error,
        conservation_error: (total_sa - total_delta).abs(),
        credited_brands: credited,
    })
}

/// Plot-ready series derived from a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    /// `(lower, upper, count)` over `Δ / σ(full)` in `[0, 1]`; values
    /// outside the range land in the end bins.
    pub delta_ratio_histogram: Vec<(f64, f64, u64)>,
    /// `(credit, cumulative fraction)` over every tuple credit.
    pub shapley_ecdf: Vec<(f64, f64)>,
    pub position_means: Vec<PositionMean>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionMean {
    pub brand: u32,
    pub position: u32,
    /// Mean credit per order whose exposure contains the position.
    pub mean_shapley: f64,
    /// Share of the brand's value this position receives under the
    /// Shapley allocation.
    pub shapley_share: f64,
    /// Share of the brand's clicked orders whose last click was here.
    pub last_click_share: Option<f64>,
}

/// Last clicked `(position, day)` of `brand` on days `..= day`. Ties on the
/// same day go to the slot with more clicks, then the lower slot.
fn last_click(clicks: &[ClickRecord], brand: u32, day: u32) -> Option<u32> {
    clicks
        .iter()
        .filter(|c| c.brand == brand && c.day <= day && c.clicks > 0)
        .max_by(|a, b| {
            a.day
                .cmp(&b.day)
                .then(a.clicks.cmp(&b.clicks))
                .then(b.position.cmp(&a.position))
        })
        .map(|c| c.position)
}

pub fn plot_data(run: &StoredRun, clicks: Option<&[ClickRecord]>) -> PlotData {
    let mut hist = vec![0u64; HISTOGRAM_BINS];
    for o in run
        .orders
        .iter()
        .filter(|o| o.status == OrderStatus::Attributed)
    {
        let ratio = if o.sigma_full > 0.0 {
            o.delta / o.sigma_full
        } else {
            0.0
        };
        let bin =
            ((ratio * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        hist[bin] += 1;
    }
    let width = 1.0 / HISTOGRAM_BINS as f64;
    let delta_ratio_histogram = hist
        .into_iter()
        .enumerate()
        .map(|(i, n)| (i as f64 * width, (i + 1) as f64 * width, n))
        .collect();

    let mut values: Vec<f64> = run.credits.iter().map(|c| c.credit).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mut shapley_ecdf: Vec<(f64, f64)> = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match shapley_ecdf.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => shapley_ecdf.push((*v, frac)),
        }
    }

    let mut by_user: HashMap<UserId, Vec<ClickRecord>> = HashMap::new();
    if let Some(clicks) = clicks {
        for c in clicks {
            by_user.entry(c.user_id).or_default().push(*c);
        }
    }
    let mut last: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut clicked_orders: BTreeMap<u32, u64> = BTreeMap::new();
    if clicks.is_some() {
        for o in &run.orders {
            let cs = by_user.get(&o.user_id).map_or(&[][..], Vec::as_slice);
            if let Some(k) = last_click(cs, o.brand_id, o.day) {
                *last.entry((o.brand_id, k)).or_default() += 1;
                *clicked_orders.entry(o.brand_id).or_default() += 1;
            }
        }
    }
    let mut brand_total: BTreeMap<u32, f64> = BTreeMap::new();
    for r in &run.rows {
        *brand_total.entry(r.brand_id).or_default() += r.sa;
    }
    let position_means = run
        .rows
        .iter()
        .map(|r| {
            let total = brand_total[&r.brand_id];
            PositionMean {
                brand: r.brand_id,
                position: r.position_id,
                mean_shapley: if r.order_count > 0 {
                    r.sa / r.order_count as f64
                } else {
                    0.0
                },
                shapley_share: if total != 0.0 { r.sa / total } else { 0.0 },
                last_click_share: clicks.map(|_| {
                    let denom = clicked_orders.get(&r.brand_id).copied().unwrap_or(0);
                    if denom == 0 {
                        0.0
                    } else {
                        last.get(&(r.brand_id, r.position_id)).copied().unwrap_or(0) as f64
                            / denom as f64
                    }
                }),
            }
        })
        .collect();
    PlotData {
        delta_ratio_histogram,
        shapley_ecdf,
        position_means,
    }
}

pub fn write_plot_data(plots: &PlotData, dir: &Path) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e| IngestError::io(&path, e)
    };
    let path = dir.join(DELTA_HISTOGRAM_FILE);
    let mut w = create(&path)?;
    writeln!(w, "bin_lower,bin_upper,orders").map_err(io(&path))?;
    for (lo, hi, n) in &plots.delta_ratio_histogram {
        writeln!(w, "{lo},{hi},{n}").map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join(ECDF_FILE);
    let mut w = create(&path)?;
    writeln!(w, "credit,cumulative_fraction").map_err(io(&path))?;
    for (v, f) in &plots.shapley_ecdf {
        writeln!(w, "{v},{f}").map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join(POSITION_MEAN_FILE);
    let mut w = create(&path)?;
    writeln!(
        w,
        "brand_id,position_id,mean_shapley,shapley_share,last_click_share"
    )
    .map_err(io(&path))?;
    for p in &plots.position_means {
        let lc = p.last_click_share.map_or(String::new(), |v| v.to_string());
        writeln!(
            w,
            "{},{},{},{},{}",
            p.brand, p.position, p.mean_shapley, p.shapley_share, lc
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))
}

/// Synthetic benchmark orders with controlled exposure-set sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub orders: usize,
    /// Fraction of orders whose exposure set is drawn from `large`.
    pub large_fraction: f64,
    /// Inclusive `|N|` range of the remaining orders.
    pub small: (usize, usize),
    /// Inclusive `|N|` range of the large orders.
    pub large: (usize, usize),
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            orders: 6000,
            large_fraction: 0.4,
            small: (1, 10),
            large: (13, 17),
            repetitions: 5,
            seed: 0,
        }
    }
}

/// A benchmark order: one user's impressions and features.
#[derive(Debug, Clone)]
pub struct BenchOrder {
    pub order: Order,
    pub tensor: ImpressionTensor,
    pub features: UserFeatures,
}

#[derive(Debug, Clone)]
pub struct BenchInstances {
    pub prices: PriceSeries,
    pub orders: Vec<BenchOrder>,
}

impl BenchInstances {
    /// Draws orders for `dims` whose own-brand exposure sets have exactly the
    /// sizes requested by `spec`. Competitor impressions are sprinkled in too.
    pub fn generate(
        spec: &BenchSpec,
        dims: Dims,
        features: usize,
        prices: PriceSeries,
    ) -> Result<Self, PipelineError> {
        let slots = (dims.positions * dims.days) as usize;
        if spec.large.1 > slots || spec.small.1 > slots || spec.small.0 == 0 {
            return Err(PipelineError::InvalidJob(format!(
                "exposure sizes must lie in 1..={slots}"
            )));
        }
        if spec.small.0 > spec.small.1 || spec.large.0 > spec.large.1 {
            return Err(PipelineError::InvalidJob(
                "empty exposure-size range".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(&[spec.seed, 0xbe]));
        let last = dims.days - 1;
        let large_count = (spec.orders as f64 * spec.large_fraction).round() as usize;
        let mut orders = Vec::with_capacity(spec.orders);
        for i in 0..spec.orders {
            let (lo, hi) = if i < large_count {
                spec.large
            } else {
                spec.small
            };
            let n = rng.random_range(lo..=hi);
            let brand = rng.random_range(0..dims.brands);
            let mut own: Vec<usize> = (0..slots).collect();
            let (picked, _) = own.partial_shuffle(&mut rng, n);
            let mut entries: Vec<(Cell, u32)> = picked
                .iter()
                .map(|&s| {
                    let (k, t) = ((s as u32) % dims.positions, (s as u32) / dims.positions);
                    (Cell::new(brand, k, t), rng.random_range(1..=3))
                })
                .collect();
            for other in (0..dims.brands).filter(|&b| b != brand) {
                for _ in 0..rng.random_range(0..3) {
                    let cell = Cell::new(
                        other,
                        rng.random_range(0..dims.positions),
                        rng.random_range(0..=last),
                    );
                    if !entries.iter().any(|(c, _)| *c == cell) {
                        entries.push((cell, rng.random_range(1..=3)));
                    }
                }
            }
            let values = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
            orders.push(BenchOrder {
                order: Order {
                    user_id: i as UserId,
                    brand,
                    day: last,
                },
                tensor: ImpressionTensor::from_entries(dims, entries).map_err(IngestError::from)?,
                features: UserFeatures::new(values).map_err(IngestError::from)?,
            });
        }
        // mix large and small orders so every chunk of work looks alike
        orders.shuffle(&mut rng);
        Ok(BenchInstances { prices, orders })
    }

    pub fn large_fraction(&self, cutoff: usize) -> f64 {
        let large = self
            .orders
            .iter()
            .filter(|o| {
                o.tensor
                    .exposure_set_until(o.order.brand, o.order.day)
                    .cardinality()
                    > cutoff
            })
            .count();
        large as f64 / self.orders.len().max(1) as f64
    }
}

/// Per-order pre-normalization totals and position credits.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchPass {
    pub raw_sums: Vec<f64>,
    pub position_credits: Vec<BTreeMap<u32, f64>>,
    pub seconds: f64,
}

pub fn bench_pass(
    model: &dyn ResponseModel,
    instances: &BenchInstances,
    config: &ShapleyConfig,
    workers: usize,
) -> Result<BenchPass, PipelineError> {
    let start = Instant::now();
    let results = par::map_ordered(&instances.orders, workers, |o| {
        let ctx = OrderContext::new(
            &o.tensor,
            &instances.prices,
            &o.features,
            o.order.brand,
            o.order.day,
        );
        attribute_order(model, &ctx, &o.order, config)
    });
    let seconds = start.elapsed().as_secs_f64();
    let mut raw_sums = Vec::with_capacity(results.len());
    let mut position_credits = Vec::with_capacity(results.len());
    for r in results {
        let a = r?;
        raw_sums.push(a.raw_sum);
        position_credits.push(a.position_credits);
    }
    Ok(BenchPass {
        raw_sums,
        position_credits,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Strategy,
    pub orders: usize,
    pub repetitions: usize,
    pub mean_seconds: f64,
    pub orders_per_minute: f64,
    /// `sqrt(1/n Σ_l Σ_k (ϱ_lk − ϱ*_lk)²)` over the orders' normalized
    /// position credits, with `ϱ*` from exact enumeration.
    pub err: f64,
    /// `sqrt(1/n Σ_l (SA_l − SA*_l)²)` over pre-normalization totals.
    pub total_err: f64,
}

/// Credit-level and total-level root mean squared differences between
/// `pass` and `reference`; see [`BenchRow`].
pub fn bench_errors(pass: &BenchPass, reference: &BenchPass) -> (f64, f64) {
    let n = pass.raw_sums.len().max(1) as f64;
    let total = pass
        .raw_sums
        .iter()
        .zip(&reference.raw_sums)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let mut sq = 0.0;
    for (a, b) in pass
        .position_credits
        .iter()
        .zip(&reference.position_credits)
    {
        for k in a.keys().chain(b.keys()) {
            // keys present in both are visited twice
            let both = a.contains_key(k) && b.contains_key(k);
            let d = a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0);
            sq += if both { d * d / 2.0 } else { d * d };
        }
    }
    ((sq / n).sqrt(), total.sqrt())
}

fn bench_row(
    method: Strategy,
    instances: &BenchInstances,
    seconds: &[f64],
    pass: &BenchPass,
    reference: &BenchPass,
) -> BenchRow {
    let (err, total_err) = bench_errors(pass, reference);
    let mean_seconds = seconds.iter().sum::<f64>() / seconds.len() as f64;
    BenchRow {
        method,
        orders: instances.orders.len(),
        repetitions: seconds.len(),
        mean_seconds,
        orders_per_minute: instances.orders.len() as f64 * 60.0 / mean_seconds.max(1e-12),
        err,
        total_err,
    }
}

/// Times `method` over `repetitions` passes and scores its first pass
/// against `reference`.
pub fn bench_method(
    model: &dyn ResponseModel,
    instances: &BenchInstances,
    base: &ShapleyConfig,
    method: Strategy,
    repetitions: usize,
    workers: usize,
    reference: &BenchPass,
) -> Result<BenchRow, PipelineError> {
    let config = ShapleyConfig {
        strategy: method,
        ..base.clone()
    };
    let mut seconds = Vec::new();
    let mut first = None;
    for _ in 0..repetitions.max(1) {
        let pass = bench_pass(model, instances, &config, workers)?;
        seconds.push(pass.seconds);
        first.get_or_insert(pass);
    }
    Ok(bench_row(
        method,
        instances,
        &seconds,
        &first.expect("one pass"),
        reference,
    ))
}

/// The exact-enumeration reference pass.
pub fn bench_reference(
    model: &dyn ResponseModel,
    instances: &BenchInstances,
    base: &ShapleyConfig,
    workers: usize,
) -> Result<BenchPass, PipelineError> {
    let config = ShapleyConfig {
        strategy: Strategy::Exact,
        ..base.clone()
    };
    bench_pass(model, instances, &config, workers)
}

/// Benchmarks each of `methods` against exact enumeration. The reference
/// pass doubles as the first timed exact repetition.
pub fn run_bench(
    model: &dyn ResponseModel,
    instances: &BenchInstances,
    base: &ShapleyConfig,
    methods: &[Strategy],
    repetitions: usize,
    workers: usize,
) -> Result<Vec<BenchRow>, PipelineError> {
    let reference = bench_reference(model, instances, base, workers)?;
    let mut rows = Vec::new();
    for &method in methods {
        if method == Strategy::Exact {
            let mut seconds = vec![reference.seconds];
            for _ in 1..repetitions.max(1) {
                seconds.push(bench_reference(model, instances, base, workers)?.seconds);
            }
            rows.push(bench_row(
                method, instances, &seconds, &reference, &reference,
            ));
        } else {
            rows.push(bench_method(
                model,
                instances,
                base,
                method,
                repetitions,
                workers,
                &reference,
            )?);
        }
    }
    Ok(rows)
}
