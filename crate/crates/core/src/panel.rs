//! Long-format panel ingestion (scanner-style price data), group-wise log
//! demeaning, product filtering by cross-store price variation, and assembly
//! of per-store-week coordinate vectors for the mixture estimator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npem::DataMatrix;

/// One (category, zone, store, week, product) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub category: String,
    pub zone: String,
    pub store: String,
    pub week: i64,
    pub product: String,
    pub price: f64,
    pub quantity: f64,
}

/// Validated long panel. `demeaned` carries the log-demeaned price column
/// once [`log_demean`] has run.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelTable {
    rows: Vec<PanelRow>,
    demeaned: Option<Vec<f64>>,
}

impl PanelTable {
    pub fn new(rows: Vec<PanelRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, row) in rows.iter().enumerate() {
            if !(row.price.is_finite() && row.price > 0.0) {
                return Err(Error::InvalidRow {
                    line: i as u64 + 1,
                    message: format!("price {} must be positive (log-scale transforms)", row.price),
                });
            }
            if !(row.quantity.is_finite() && row.quantity >= 0.0) {
                return Err(Error::InvalidRow {
                    line: i as u64 + 1,
                    message: format!("quantity {} must be non-negative", row.quantity),
                });
            }
            let key = (
                row.category.clone(),
                row.zone.clone(),
                row.store.clone(),
                row.week,
                row.product.clone(),
            );
            if !seen.insert(key) {
                return Err(Error::DuplicateKey {
                    key: format!(
                        "{}, {}, {}, {}, {}",
                        row.category, row.zone, row.store, row.week, row.product
                    ),
                });
            }
        }
        Ok(Self {
            rows,
            demeaned: None,
        })
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The log-demeaned price column, if computed.
    pub fn demeaned(&self) -> Option<&[f64]> {
        self.demeaned.as_deref()
    }

    pub fn categories(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.category.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn zones(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.zone.clone()).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Field a demeaning group key can include.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Category,
    Zone,
    Store,
    Week,
    Product,
}

impl GroupField {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "category" => Ok(Self::Category),
            "zone" => Ok(Self::Zone),
            "store" => Ok(Self::Store),
            "week" => Ok(Self::Week),
            "product" => Ok(Self::Product),
            other => Err(Error::InvalidOptions(format!(
                "unknown group field {other:?}"
            ))),
        }
    }

    fn key_part(&self, row: &PanelRow) -> String {
        match self {
            Self::Category => row.category.clone(),
            Self::Zone => row.zone.clone(),
            Self::Store => row.store.clone(),
            Self::Week => row.week.to_string(),
            Self::Product => row.product.clone(),
        }
    }
}

/// The demeaning key matching zone-week-product mean subtraction.
pub fn default_demean_key() -> Vec<GroupField> {
    vec![GroupField::Zone, GroupField::Week, GroupField::Product]
}

fn group_key(row: &PanelRow, fields: &[GroupField]) -> String {
    fields
        .iter()
        .map(|f| f.key_part(row))
        .collect::<Vec<_>>()
        .join("\u{1f}")
}

/// Subtract the within-group mean of log price. When the panel already
/// carries a demeaned column the column itself is demeaned again, which makes
/// the transform idempotent (group means are already zero).
pub fn log_demean(panel: &PanelTable, group: &[GroupField]) -> Result<PanelTable> {
    if group.is_empty() {
        return Err(Error::InvalidOptions(
            "demeaning needs at least one group field".into(),
        ));
    }
    let base: Vec<f64> = match panel.demeaned() {
        Some(x) => x.to_vec(),
        None => panel.rows().iter().map(|r| r.price.ln()).collect(),
    };
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (row, &v) in panel.rows().iter().zip(&base) {
        let entry = sums.entry(group_key(row, group)).or_insert((0.0, 0));
        entry.0 += v;
        entry.1 += 1;
    }
    let demeaned: Vec<f64> = panel
        .rows()
        .iter()
        .zip(&base)
        .map(|(row, &v)| {
            let (sum, count) = sums[&group_key(row, group)];
            v - sum / count as f64
        })
        .collect();
    Ok(PanelTable {
        rows: panel.rows.clone(),
        demeaned: Some(demeaned),
    })
}

/// Keep products whose relative price spread across stores within a
/// (zone, week) cell exceeds `threshold` somewhere, sorted by that maximum
/// spread, largest first.
pub fn filter_products(
    panel: &PanelTable,
    threshold: f64,
    window: Option<(i64, i64)>,
) -> Result<Vec<String>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidOptions(format!(
            "filter threshold {threshold} outside (0, 1)"
        )));
    }
    // product -> (zone, week) -> (min price, max price)
    type SpreadCells<'a> = BTreeMap<(&'a str, i64), (f64, f64)>;
    let mut spread: BTreeMap<&str, SpreadCells> = BTreeMap::new();
    for row in panel.rows() {
        if let Some((lo, hi)) = window {
            if row.week < lo || row.week > hi {
                continue;
            }
        }
        let cell = spread
            .entry(&row.product)
            .or_default()
            .entry((&row.zone, row.week))
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        cell.0 = cell.0.min(row.price);
        cell.1 = cell.1.max(row.price);
    }
    let mut kept: Vec<(String, f64)> = spread
        .into_iter()
        .filter_map(|(product, cells)| {
            let max_spread = cells
                .values()
                .map(|(lo, hi)| (hi - lo) / lo)
                .fold(0.0f64, f64::max);
            (max_spread > threshold).then(|| (product.to_string(), max_spread))
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyResult(format!(
            "no product varies more than {:.1}% across stores",
            threshold * 100.0
        )));
    }
    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(kept.into_iter().map(|(p, _)| p).collect())
}

/// Which (zone, category) slice to widen and which products become columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideMatrixSpec {
    /// Restrict to one zone (None = all).
    pub zone: Option<String>,
    /// Restrict to one category (None = all).
    pub category: Option<String>,
    /// Ordered product columns.
    pub coordinates: Vec<String>,
}

/// What to do with (store, week) cells that lack a product observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Drop store-weeks with any missing coordinate.
    DropUnit,
    /// Drop product columns with any missing cell.
    DropProduct,
}

/// A (store, week) unit backing one matrix row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitKey {
    pub store: String,
    pub week: i64,
}

/// Wide matrix plus the bookkeeping needed to map labels back to store-weeks.
#[derive(Debug, Clone)]
pub struct MatrixAssembly {
    pub matrix: DataMatrix,
    /// Row i of the matrix is this store-week.
    pub units: Vec<UnitKey>,
    /// Product columns actually used, in column order.
    pub coordinates: Vec<String>,
    /// Stores excluded for missing more than 15% of observed weeks.
    pub dropped_stores: Vec<String>,
    /// Product columns removed under [`MissingPolicy::DropProduct`].
    pub dropped_products: Vec<String>,
    /// Store-weeks removed under [`MissingPolicy::DropUnit`].
    pub dropped_units: usize,
}

/// Stores missing more than this share of observed weeks are excluded.
const MISSING_WEEK_TOLERANCE: f64 = 0.15;

/// Widen the panel: one row per (store, week), one column per product, values
/// from the demeaned column when present (raw log price otherwise).
pub fn to_matrix(
    panel: &PanelTable,
    spec: &WideMatrixSpec,
    policy: MissingPolicy,
) -> Result<MatrixAssembly> {
    if spec.coordinates.is_empty() {
        return Err(Error::InvalidOptions(
            "matrix spec needs at least one product coordinate".into(),
        ));
    }
    let in_slice = |row: &PanelRow| -> bool {
        spec.zone.as_ref().is_none_or(|z| &row.zone == z)
            && spec.category.as_ref().is_none_or(|c| &row.category == c)
    };

    let values: Vec<f64> = match panel.demeaned() {
        Some(x) => x.to_vec(),
        None => panel.rows().iter().map(|r| r.price.ln()).collect(),
    };

    let mut weeks = BTreeSet::new();
    let mut store_weeks: BTreeMap<&str, BTreeSet<i64>> = BTreeMap::new();
    let mut cells: BTreeMap<(&str, i64, &str), f64> = BTreeMap::new();
    for (row, &v) in panel.rows().iter().zip(&values) {
        if !in_slice(row) {
            continue;
        }
        weeks.insert(row.week);
        store_weeks.entry(&row.store).or_default().insert(row.week);
        if spec.coordinates.contains(&row.product) {
            cells.insert((&row.store, row.week, &row.product), v);
        }
    }
    if weeks.is_empty() {
        return Err(Error::EmptyResult("no rows in the requested slice".into()));
    }

    let total_weeks = weeks.len();
    let mut dropped_stores = Vec::new();
    let mut kept_stores = Vec::new();
    for (store, observed) in &store_weeks {
        let missing = total_weeks - observed.len();
        if missing as f64 > MISSING_WEEK_TOLERANCE * total_weeks as f64 {
            dropped_stores.push(store.to_string());
        } else {
            kept_stores.push(store.to_string());
        }
    }
    if kept_stores.is_empty() {
        return Err(Error::EmptyResult(format!(
            "every store misses more than {:.0}% of the observed weeks",
            MISSING_WEEK_TOLERANCE * 100.0
        )));
    }

    // Candidate units: observed store-weeks of the kept stores.
    let mut units: Vec<UnitKey> = Vec::new();
    for store in &kept_stores {
        for &week in &store_weeks[store.as_str()] {
            units.push(UnitKey {
                store: store.clone(),
                week,
            });
        }
    }

    let mut coordinates = spec.coordinates.clone();
    let mut dropped_products = Vec::new();
    let mut dropped_units = 0usize;

    match policy {
        MissingPolicy::DropProduct => {
            coordinates.retain(|product| {
                let complete = units.iter().all(|u| {
                    cells.contains_key(&(u.store.as_str(), u.week, product.as_str()))
                });
                if !complete {
                    dropped_products.push(product.clone());
                }
                complete
            });
            if coordinates.is_empty() {
                return Err(Error::EmptyResult(
                    "every product column has missing cells".into(),
                ));
            }
        }
        MissingPolicy::DropUnit => {
            let before = units.len();
            units.retain(|u| {
                coordinates
                    .iter()
                    .all(|p| cells.contains_key(&(u.store.as_str(), u.week, p.as_str())))
            });
            dropped_units = before - units.len();
            if units.is_empty() {
                return Err(Error::EmptyResult(
                    "every store-week has missing coordinates".into(),
                ));
            }
        }
    }

    let mut flat = Vec::with_capacity(units.len() * coordinates.len());
    for u in &units {
        for p in &coordinates {
            flat.push(cells[&(u.store.as_str(), u.week, p.as_str())]);
        }
    }
    let matrix = DataMatrix::new(units.len(), coordinates.len(), flat)?;

    Ok(MatrixAssembly {
        matrix,
        units,
        coordinates,
        dropped_stores,
        dropped_products,
        dropped_units,
    })
}

/// Map from the logical column names to the CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub category: String,
    pub zone: String,
    pub store: String,
    pub week: String,
    pub product: String,
    pub price: String,
    pub quantity: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self {
            category: "category".into(),
            zone: "zone".into(),
            store: "store".into(),
            week: "week".into(),
            product: "product".into(),
            price: "price".into(),
            quantity: "quantity".into(),
        }
    }
}

/// Parse a long CSV panel. Rows that fail to parse are rejected with their
/// line number.
pub fn load_panel(reader: impl Read, schema: &SchemaMap) -> Result<PanelTable> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch {
                column: name.to_string(),
            })
    };
    let idx_category = find(&schema.category)?;
    let idx_zone = find(&schema.zone)?;
    let idx_store = find(&schema.store)?;
    let idx_week = find(&schema.week)?;
    let idx_product = find(&schema.product)?;
    let idx_price = find(&schema.price)?;
    let idx_quantity = find(&schema.quantity)?;

    let mut rows = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let record = record?;
        let line = i as u64 + 2; // header is line 1
        let field = |idx: usize| -> &str { record.get(idx).unwrap_or("") };
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            field(idx).trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                column: name.to_string(),
                message: format!("{e} in {:?}", field(idx)),
            })
        };
        let week = field(idx_week)
            .trim()
            .parse::<i64>()
            .map_err(|e| Error::Parse {
                line,
                column: schema.week.clone(),
                message: format!("{e} in {:?}", field(idx_week)),
            })?;
        let price = parse_f64(idx_price, &schema.price)?;
        let quantity = parse_f64(idx_quantity, &schema.quantity)?;
        if !(price.is_finite() && price > 0.0) {
            return Err(Error::InvalidRow {
                line,
                message: format!("price {price} must be positive (log-scale transforms)"),
            });
        }
        rows.push(PanelRow {
            category: field(idx_category).to_string(),
            zone: field(idx_zone).to_string(),
            store: field(idx_store).to_string(),
            week,
            product: field(idx_product).to_string(),
            price,
            quantity,
        });
    }
    PanelTable::new(rows)
}

/// Serialize a float with 17 significant digits so it round-trips exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the panel (plus the demeaned column when present) as CSV.
pub fn write_panel(panel: &PanelTable, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let has_demeaned = panel.demeaned().is_some();
    let mut header = vec![
        "category", "zone", "store", "week", "product", "price", "quantity",
    ];
    if has_demeaned {
        header.push("log_demeaned_price");
    }
    w.write_record(&header)?;
    for (i, row) in panel.rows().iter().enumerate() {
        let mut record = vec![
            row.category.clone(),
            row.zone.clone(),
            row.store.clone(),
            row.week.to_string(),
            row.product.clone(),
            format_float(row.price),
            format_float(row.quantity),
        ];
        if let Some(x) = panel.demeaned() {
            record.push(format_float(x[i]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        category: &str,
        zone: &str,
        store: &str,
        week: i64,
        product: &str,
        price: f64,
    ) -> PanelRow {
        PanelRow {
            category: category.into(),
            zone: zone.into(),
            store: store.into(),
            week,
            product: product.into(),
            price,
            quantity: 1.0,
        }
    }

    fn small_panel() -> PanelTable {
        let mut rows = Vec::new();
        for store in ["s1", "s2"] {
            for week in 1..=2 {
                for product in ["p1", "p2", "p3"] {
                    let bump = if store == "s2" { 0.1 } else { 0.0 };
                    rows.push(row("cat", "z1", store, week, product, 2.0 + bump));
                }
            }
        }
        PanelTable::new(rows).unwrap()
    }

    #[test]
    fn loads_a_well_formed_file() {
        let csv = "category,zone,store,week,product,price,quantity\n\
                   cat,z1,s1,1,p1,2.5,10\n\
                   cat,z1,s1,1,p2,3.0,5\n\
                   cat,z1,s1,2,p1,2.4,11\n";
        let panel = load_panel(csv.as_bytes(), &SchemaMap::default()).unwrap();
        assert_eq!(panel.len(), 3);
        assert_eq!(panel.rows()[1].product, "p2");
    }

    #[test]
    fn duplicate_keys_are_rejected_by_name() {
        let csv = "category,zone,store,week,product,price,quantity\n\
                   cat,z1,s1,1,p1,2.5,10\n\
                   cat,z1,s1,1,p1,2.6,10\n";
        let err = load_panel(csv.as_bytes(), &SchemaMap::default()).unwrap_err();
        match err {
            Error::DuplicateKey { key } => assert!(key.contains("s1") && key.contains("p1")),
            other => panic!("expected duplicate key, got {other}"),
        }
    }

    #[test]
    fn zero_price_is_rejected() {
        let csv = "category,zone,store,week,product,price,quantity\n\
                   cat,z1,s1,1,p1,0,10\n";
        let err = load_panel(csv.as_bytes(), &SchemaMap::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidRow { line: 2, .. }));
    }

    #[test]
    fn unparseable_numbers_carry_line_numbers() {
        let csv = "category,zone,store,week,product,price,quantity\n\
                   cat,z1,s1,1,p1,2.5,10\n\
                   cat,z1,s1,2,p1,abc,10\n";
        let err = load_panel(csv.as_bytes(), &SchemaMap::default()).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "price");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_columns_are_schema_errors() {
        let csv = "category,zone,store,week,product,price\ncat,z1,s1,1,p1,2.5\n";
        let err = load_panel(csv.as_bytes(), &SchemaMap::default()).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch { column } if column == "quantity"));
    }

    #[test]
    fn schema_map_renames_columns() {
        let csv = "cat,zn,st,wk,prod,unit_price,qty\nc,z,s,1,p,2.0,3\n";
        let schema = SchemaMap {
            category: "cat".into(),
            zone: "zn".into(),
            store: "st".into(),
            week: "wk".into(),
            product: "prod".into(),
            price: "unit_price".into(),
            quantity: "qty".into(),
        };
        let panel = load_panel(csv.as_bytes(), &schema).unwrap();
        assert_eq!(panel.rows()[0].price, 2.0);
    }

    #[test]
    fn demeaning_identical_prices_gives_zero() {
        let rows = vec![
            row("cat", "z1", "s1", 1, "p1", 3.0),
            row("cat", "z1", "s2", 1, "p1", 3.0),
        ];
        let panel = PanelTable::new(rows).unwrap();
        let demeaned = log_demean(&panel, &default_demean_key()).unwrap();
        assert!(demeaned.demeaned().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn demeaning_two_point_group_is_symmetric() {
        let rows = vec![
            row("cat", "z1", "s1", 1, "p1", 1.0f64.exp()),
            row("cat", "z1", "s2", 1, "p1", 3.0f64.exp()),
        ];
        let panel = PanelTable::new(rows).unwrap();
        let demeaned = log_demean(&panel, &default_demean_key()).unwrap();
        let x = demeaned.demeaned().unwrap();
        assert!((x[0] + 1.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_means_vanish_after_demeaning() {
        let panel = small_panel();
        let demeaned = log_demean(&panel, &default_demean_key()).unwrap();
        let x = demeaned.demeaned().unwrap();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (row, &v) in demeaned.rows().iter().zip(x) {
            let key = format!("{}-{}-{}", row.zone, row.week, row.product);
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        for (key, (sum, count)) in sums {
            assert!(
                (sum / count as f64).abs() < 1e-12,
                "group {key} mean {sum}"
            );
        }
    }

    #[test]
    fn demeaning_is_idempotent() {
        let panel = small_panel();
        let once = log_demean(&panel, &default_demean_key()).unwrap();
        let twice = log_demean(&once, &default_demean_key()).unwrap();
        for (a, b) in once.demeaned().unwrap().iter().zip(twice.demeaned().unwrap()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_keeps_products_with_cross_store_spread() {
        let rows = vec![
            // p1: 5% spread in week 1.
            row("cat", "z1", "s1", 1, "p1", 2.00),
            row("cat", "z1", "s2", 1, "p1", 2.10),
            // p2: identical everywhere.
            row("cat", "z1", "s1", 1, "p2", 3.00),
            row("cat", "z1", "s2", 1, "p2", 3.00),
        ];
        let panel = PanelTable::new(rows).unwrap();
        let kept = filter_products(&panel, 0.03, None).unwrap();
        assert_eq!(kept, vec!["p1".to_string()]);
    }

    #[test]
    fn filter_threshold_zero_is_invalid() {
        let panel = small_panel();
        assert!(matches!(
            filter_products(&panel, 0.0, None),
            Err(Error::InvalidOptions(_))
        ));
    }

    #[test]
    fn filter_is_monotone_in_threshold() {
        let mut rows = Vec::new();
        for (i, spread) in [0.02, 0.05, 0.10, 0.20].iter().enumerate() {
            let p = format!("p{i}");
            rows.push(row("cat", "z1", "s1", 1, &p, 2.0));
            rows.push(row("cat", "z1", "s2", 1, &p, 2.0 * (1.0 + spread)));
        }
        let panel = PanelTable::new(rows).unwrap();
        let loose = filter_products(&panel, 0.03, None).unwrap();
        let tight = filter_products(&panel, 0.08, None).unwrap();
        assert!(tight.iter().all(|p| loose.contains(p)));
        assert_eq!(loose.len(), 3);
        assert_eq!(tight.len(), 2);
        // Ordered by descending spread.
        assert_eq!(loose[0], "p3");
    }

    #[test]
    fn complete_panel_widen_to_full_matrix() {
        let panel = log_demean(&small_panel(), &default_demean_key()).unwrap();
        let spec = WideMatrixSpec {
            zone: Some("z1".into()),
            category: Some("cat".into()),
            coordinates: vec!["p1".into(), "p2".into(), "p3".into()],
        };
        let assembly = to_matrix(&panel, &spec, MissingPolicy::DropUnit).unwrap();
        assert_eq!(assembly.matrix.nrows(), 4);
        assert_eq!(assembly.matrix.ncols(), 3);
        assert_eq!(assembly.units.len(), 4);
        assert!(assembly.dropped_stores.is_empty());
        // Unit index maps rows back to store-weeks bijectively.
        let mut units = assembly.units.clone();
        units.dedup();
        assert_eq!(units.len(), 4);
    }

    #[test]
    fn store_missing_too_many_weeks_is_excluded() {
        let mut rows = Vec::new();
        for week in 1..=10 {
            rows.push(row("cat", "z1", "s1", week, "p1", 2.0 + week as f64 * 0.01));
            if week <= 8 {
                rows.push(row("cat", "z1", "s2", week, "p1", 2.1));
            }
        }
        let panel = PanelTable::new(rows).unwrap();
        let spec = WideMatrixSpec {
            zone: None,
            category: None,
            coordinates: vec!["p1".into()],
        };
        let assembly = to_matrix(&panel, &spec, MissingPolicy::DropUnit).unwrap();
        assert_eq!(assembly.dropped_stores, vec!["s2".to_string()]);
        assert!(assembly.units.iter().all(|u| u.store == "s1"));
    }

    #[test]
    fn drop_product_policy_removes_sparse_columns() {
        let mut rows = Vec::new();
        for store in ["s1", "s2"] {
            for week in 1..=2 {
                rows.push(row("cat", "z1", store, week, "p1", 2.0));
                // p2 missing for s2 in week 2.
                if !(store == "s2" && week == 2) {
                    rows.push(row("cat", "z1", store, week, "p2", 3.0));
                }
            }
        }
        let panel = PanelTable::new(rows).unwrap();
        let spec = WideMatrixSpec {
            zone: None,
            category: None,
            coordinates: vec!["p1".into(), "p2".into()],
        };
        let by_product = to_matrix(&panel, &spec, MissingPolicy::DropProduct).unwrap();
        assert_eq!(by_product.coordinates, vec!["p1".to_string()]);
        assert_eq!(by_product.dropped_products, vec!["p2".to_string()]);
        assert_eq!(by_product.matrix.nrows(), 4);

        let by_unit = to_matrix(&panel, &spec, MissingPolicy::DropUnit).unwrap();
        assert_eq!(by_unit.coordinates.len(), 2);
        assert_eq!(by_unit.matrix.nrows(), 3);
        assert_eq!(by_unit.dropped_units, 1);
    }

    #[test]
    fn panel_round_trips_through_csv() {
        let panel = log_demean(&small_panel(), &default_demean_key()).unwrap();
        let mut buf = Vec::new();
        write_panel(&panel, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let reloaded = load_panel(text.as_bytes(), &SchemaMap::default()).unwrap();
        assert_eq!(reloaded.len(), panel.len());
        for (a, b) in reloaded.rows().iter().zip(panel.rows()) {
            assert_eq!(a.price, b.price);
            assert_eq!(a.quantity, b.quantity);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn filter_narrows_with_threshold(
                t1 in 0.01f64..0.5,
                t2 in 0.01f64..0.5,
                spreads in proptest::collection::vec(0.0f64..0.6, 1..8),
            ) {
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                let mut rows = Vec::new();
                for (i, s) in spreads.iter().enumerate() {
                    let p = format!("p{i}");
                    rows.push(row("cat", "z1", "s1", 1, &p, 2.0));
                    rows.push(row("cat", "z1", "s2", 1, &p, 2.0 * (1.0 + s)));
                }
                let panel = PanelTable::new(rows).unwrap();
                let loose = filter_products(&panel, lo, None).unwrap_or_default();
                let tight = filter_products(&panel, hi, None).unwrap_or_default();
                prop_assert!(tight.iter().all(|p| loose.contains(p)));
            }
        }
    }
}
