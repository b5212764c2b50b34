//! Reading and writing attribution windows as a directory of headered CSVs:
//!
//! | file | header |
//! |------|--------|
//! | `impressions.csv` | `user_id,brand_id,position_id,day,count` |
//! | `orders.csv` | `user_id,brand_id,day` |
//! | `prices.csv` | `brand_id,day,price_index` |
//! | `users.csv` | `user_id,f0,..,f{R-1}` |
//! | `clicks.csv` (optional) | `user_id,brand_id,position_id,day,clicks` |
//!
//! plus `manifest.json` naming the files and declaring `B`, `K`, `T`, `R`.
//! Days are 0-based.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClickRecord, Dataset, UserRecord};
use crate::error::IngestError;
use crate::types::{Cell, Dims, ImpressionTensor, Order, PriceSeries, UserFeatures, UserId};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const IMPRESSIONS_HEADER: [&str; 5] = ["user_id", "brand_id", "position_id", "day", "count"];
const ORDERS_HEADER: [&str; 3] = ["user_id", "brand_id", "day"];
const PRICES_HEADER: [&str; 3] = ["brand_id", "day", "price_index"];
const CLICKS_HEADER: [&str; 5] = ["user_id", "brand_id", "position_id", "day", "clicks"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub brands: u32,
    pub positions: u32,
    pub days: u32,
    pub features: usize,
    pub impressions: PathBuf,
    pub orders: PathBuf,
    pub prices: PathBuf,
    pub users: PathBuf,
    #[serde(default)]
    pub clicks: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn standard(dims: Dims, features: usize, with_clicks: bool) -> Self {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            brands: dims.brands,
            positions: dims.positions,
            days: dims.days,
            features,
            impressions: "impressions.csv".into(),
            orders: "orders.csv".into(),
            prices: "prices.csv".into(),
            users: "users.csv".into(),
            clicks: with_clicks.then(|| "clicks.csv".into()),
        }
    }

    pub fn read(dir: &Path) -> Result<Self, IngestError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| IngestError::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| IngestError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if m.format_version != FORMAT_VERSION {
            return Err(IngestError::Format {
                path,
                message: format!("unsupported format version {}", m.format_version),
            });
        }
        Ok(m)
    }

    pub fn dims(&self) -> Result<Dims, IngestError> {
        Dims::new(self.brands, self.positions, self.days).map_err(IngestError::from)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Treat missing price cells and missing user rows as errors.
    pub strict: bool,
}

struct Reader {
    path: PathBuf,
    inner: csv::Reader<File>,
}

impl Reader {
    fn open(path: PathBuf, expected: &[&str]) -> Result<Self, IngestError> {
        let file = File::open(&path).map_err(|e| IngestError::io(&path, e))?;
        let mut inner = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let header = inner
            .headers()
            .map_err(|e| IngestError::parse(&path, 1, e.to_string()))?
            .clone();
        let got: Vec<&str> = header.iter().collect();
        if got != expected {
            return Err(IngestError::parse(
                &path,
                1,
                format!(
                    "expected header `{}`, found `{}`",
                    expected.join(","),
                    got.join(",")
                ),
            ));
        }
        Ok(Reader { path, inner })
    }

    /// Yields `(line, record)` pairs.
    fn rows(&mut self) -> impl Iterator<Item = Result<(u64, csv::StringRecord), IngestError>> + '_ {
        let path = self.path.clone();
        self.inner.records().map(move |r| {
            let rec = r.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                IngestError::parse(&path, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok((line, rec))
        })
    }
}

fn field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
) -> Result<T, IngestError> {
    let raw = rec
        .get(i)
        .ok_or_else(|| IngestError::parse(path, line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| IngestError::parse(path, line, format!("invalid {name} `{raw}`")))
}

fn check_range(
    path: &Path,
    line: u64,
    name: &str,
    value: u32,
    limit: u32,
) -> Result<(), IngestError> {
    if value >= limit {
        return Err(IngestError::DimMismatch(format!(
            "{}:{line}: {name} {value} outside declared range 0..{limit}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads and validates the dataset described by `dir/manifest.json`.
pub fn load(dir: &Path, options: LoadOptions) -> Result<Dataset, IngestError> {
    let manifest = DatasetManifest::read(dir)?;
    load_with_manifest(dir, &manifest, options)
}

pub fn load_with_manifest(
    dir: &Path,
    manifest: &DatasetManifest,
    options: LoadOptions,
) -> Result<Dataset, IngestError> {
    let dims = manifest.dims()?;
    let r = manifest.features;

    // impressions
    let path = dir.join(&manifest.impressions);
    let mut reader = Reader::open(path.clone(), &IMPRESSIONS_HEADER)?;
    let mut cells: BTreeMap<UserId, Vec<(Cell, u32)>> = BTreeMap::new();
    let mut seen: HashMap<(UserId, Cell), u64> = HashMap::new();
    for row in reader.rows() {
        let (line, rec) = row?;
        let user: UserId = field(&path, line, &rec, 0, "user_id")?;
        let brand: u32 = field(&path, line, &rec, 1, "brand_id")?;
        let position: u32 = field(&path, line, &rec, 2, "position_id")?;
        let day: u32 = field(&path, line, &rec, 3, "day")?;
        let count: i64 = field(&path, line, &rec, 4, "count")?;
        check_range(&path, line, "brand_id", brand, dims.brands)?;
        check_range(&path, line, "position_id", position, dims.positions)?;
        check_range(&path, line, "day", day, dims.days)?;
        if count < 0 {
            return Err(IngestError::NegativeCount {
                path,
                line,
                value: count,
            });
        }
        let count = u32::try_from(count).map_err(|_| IngestError::CountOverflow {
            path: path.clone(),
            line,
            value: count,
        })?;
        let cell = Cell::new(brand, position, day);
        if let Some(first) = seen.insert((user, cell), line) {
            return Err(IngestError::DuplicateKey {
                path,
                line,
                key: format!(
                    "user {user}, brand {brand}, position {position}, day {day} (first on line {first})"
                ),
            });
        }
        cells.entry(user).or_default().push((cell, count));
    }
    drop(seen);

    // users
    let path = dir.join(&manifest.users);
    let header: Vec<String> = std::iter::once("user_id".to_string())
        .chain((0..r).map(|i| format!("f{i}")))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut reader = Reader::open(path.clone(), &header_refs)?;
    let mut features: BTreeMap<UserId, UserFeatures> = BTreeMap::new();
    for row in reader.rows() {
        let (line, rec) = row?;
        let user: UserId = field(&path, line, &rec, 0, "user_id")?;
        let values = (0..r)
            .map(|i| field::<f64>(&path, line, &rec, i + 1, &header[i + 1]))
            .collect::<Result<Vec<_>, _>>()?;
        let values = UserFeatures::new(values)
            .map_err(|e| IngestError::parse(&path, line, e.to_string()))?;
        if features.insert(user, values).is_some() {
            return Err(IngestError::DuplicateKey {
                path,
                line,
                key: format!("user {user}"),
            });
        }
    }

    // orders
    let path = dir.join(&manifest.orders);
    let mut reader = Reader::open(path.clone(), &ORDERS_HEADER)?;
    let mut orders = Vec::new();
    let mut order_keys = HashSet::new();
    for row in reader.rows() {
        let (line, rec) = row?;
        let order = Order {
            user_id: field(&path, line, &rec, 0, "user_id")?,
            brand: field(&path, line, &rec, 1, "brand_id")?,
            day: field(&path, line, &rec, 2, "day")?,
        };
        check_range(&path, line, "brand_id", order.brand, dims.brands)?;
        check_range(&path, line, "day", order.day, dims.days)?;
        if !order_keys.insert(order) {
            return Err(IngestError::DuplicateKey {
                path,
                line,
                key: format!("order {order:?}"),
            });
        }
        orders.push(order);
    }

    // prices
    let path = dir.join(&manifest.prices);
    let mut reader = Reader::open(path.clone(), &PRICES_HEADER)?;
    let mut price_cells: Vec<Option<f64>> = vec![None; (dims.brands * dims.days) as usize];
    for row in reader.rows() {
        let (line, rec) = row?;
        let brand: u32 = field(&path, line, &rec, 0, "brand_id")?;
        let day: u32 = field(&path, line, &rec, 1, "day")?;
        let value: f64 = field(&path, line, &rec, 2, "price_index")?;
        check_range(&path, line, "brand_id", brand, dims.brands)?;
        check_range(&path, line, "day", day, dims.days)?;
        if !value.is_finite() || value < 0.0 {
            return Err(IngestError::parse(
                &path,
                line,
                format!("invalid price index {value}"),
            ));
        }
        let slot = &mut price_cells[(day * dims.brands + brand) as usize];
        if slot.replace(value).is_some() {
            return Err(IngestError::DuplicateKey {
                path,
                line,
                key: format!("brand {brand}, day {day}"),
            });
        }
    }
    let prices = fill_prices(dims, price_cells, options)?;

    // clicks
    let clicks = match &manifest.clicks {
        None => None,
        Some(rel) => {
            let path = dir.join(rel);
            let mut reader = Reader::open(path.clone(), &CLICKS_HEADER)?;
            let mut out = Vec::new();
            let mut keys = HashSet::new();
            for row in reader.rows() {
                let (line, rec) = row?;
                let c = ClickRecord {
                    user_id: field(&path, line, &rec, 0, "user_id")?,
                    brand: field(&path, line, &rec, 1, "brand_id")?,
                    position: field(&path, line, &rec, 2, "position_id")?,
                    day: field(&path, line, &rec, 3, "day")?,
                    clicks: field(&path, line, &rec, 4, "clicks")?,
                };
                check_range(&path, line, "brand_id", c.brand, dims.brands)?;
                check_range(&path, line, "position_id", c.position, dims.positions)?;
                check_range(&path, line, "day", c.day, dims.days)?;
                if !keys.insert((c.user_id, c.brand, c.position, c.day)) {
                    return Err(IngestError::DuplicateKey {
                        path,
                        line,
                        key: format!("click cell {:?}", (c.user_id, c.brand, c.position, c.day)),
                    });
                }
                out.push(c);
            }
            Some(out)
        }
    };

    // every user mentioned anywhere gets a record
    let mut ids: Vec<UserId> = features
        .keys()
        .chain(cells.keys())
        .copied()
        .chain(orders.iter().map(|o| o.user_id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let mut missing = 0usize;
    let mut users = Vec::with_capacity(ids.len());
    for id in ids {
        let impressions = match cells.remove(&id) {
            Some(entries) => ImpressionTensor::from_entries(dims, entries)?,
            None => ImpressionTensor::empty(dims),
        };
        let features = match features.remove(&id) {
            Some(f) => f,
            None => {
                if options.strict {
                    return Err(IngestError::Missing(format!(
                        "user {id} has no row in users file"
                    )));
                }
                missing += 1;
                UserFeatures::zeros(r)
            }
        };
        users.push(UserRecord {
            id,
            impressions,
            features,
        });
    }
    if missing > 0 {
        log::warn!("{missing} users have no feature row; using zero features");
    }
    Ok(Dataset::new(dims, r, users, prices, orders, clicks))
}

fn fill_prices(
    dims: Dims,
    cells: Vec<Option<f64>>,
    options: LoadOptions,
) -> Result<PriceSeries, IngestError> {
    let nb = dims.brands as usize;
    let missing = cells.iter().filter(|c| c.is_none()).count();
    if missing > 0 && options.strict {
        return Err(IngestError::Missing(format!(
            "{missing} price cells are missing"
        )));
    }
    let present: Vec<f64> = cells.iter().flatten().copied().collect();
    let global = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let brand_mean: Vec<f64> = (0..nb)
        .map(|b| {
            let v: Vec<f64> = cells
                .iter()
                .skip(b)
                .step_by(nb)
                .flatten()
                .copied()
                .collect();
            if v.is_empty() {
                global
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    if missing > 0 {
        log::warn!("{missing} price cells are missing; filling with brand means");
    }
    let values = cells
        .iter()
        .enumerate()
        .map(|(i, c)| c.unwrap_or(brand_mean[i % nb]))
        .collect();
    PriceSeries::new(dims.brands, dims.days, values).map_err(IngestError::from)
}

fn create(path: &Path) -> Result<BufWriter<File>, IngestError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IngestError::io(path, e))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |e| IngestError::io(path, e)
}

/// Writes `dataset` in canonical form (sorted keys) with a standard manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest, IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    let manifest =
        DatasetManifest::standard(dataset.dims, dataset.feature_len, dataset.clicks.is_some());

    let path = dir.join(&manifest.impressions);
    let mut w = create(&path)?;
    writeln!(w, "{}", IMPRESSIONS_HEADER.join(",")).map_err(io_err(&path))?;
    for u in &dataset.users {
        let mut entries = u.impressions.entries().to_vec();
        entries.sort_by_key(|(c, _)| (c.brand, c.position, c.day));
        for (c, n) in entries {
            writeln!(w, "{},{},{},{},{}", u.id, c.brand, c.position, c.day, n)
                .map_err(io_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(&manifest.users);
    let mut w = create(&path)?;
    let header: Vec<String> = std::iter::once("user_id".to_string())
        .chain((0..dataset.feature_len).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io_err(&path))?;
    for u in &dataset.users {
        write!(w, "{}", u.id).map_err(io_err(&path))?;
        for v in u.features.as_slice() {
            write!(w, ",{v}").map_err(io_err(&path))?;
        }
        writeln!(w).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(&manifest.orders);
    let mut w = create(&path)?;
    writeln!(w, "{}", ORDERS_HEADER.join(",")).map_err(io_err(&path))?;
    for o in &dataset.orders {
        writeln!(w, "{},{},{}", o.user_id, o.brand, o.day).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(&manifest.prices);
    let mut w = create(&path)?;
    writeln!(w, "{}", PRICES_HEADER.join(",")).map_err(io_err(&path))?;
    for b in 0..dataset.dims.brands {
        for t in 0..dataset.dims.days {
            writeln!(w, "{},{},{}", b, t, dataset.prices.get(b, t)).map_err(io_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    if let (Some(rel), Some(clicks)) = (&manifest.clicks, &dataset.clicks) {
        let path = dir.join(rel);
        let mut w = create(&path)?;
        writeln!(w, "{}", CLICKS_HEADER.join(",")).map_err(io_err(&path))?;
        for c in clicks {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.user_id, c.brand, c.position, c.day, c.clicks
            )
            .map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }

    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}
