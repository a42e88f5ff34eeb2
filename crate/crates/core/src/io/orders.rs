use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demand::OrderRecord;
use crate::error::{Error, Result};
use crate::grid::{day_of, GridSpec};

pub const ORDER_HEADER: [&str; 7] = [
    "order_id",
    "dep_epoch_s",
    "dep_lng",
    "dep_lat",
    "des_lng",
    "des_lat",
    "arr_epoch_s",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DayFilter {
    Weekday,
    Weekend,
    #[default]
    All,
}

impl DayFilter {
    /// Whether local day number `day` (days since 1970-01-01) passes.
    pub fn accepts(self, day: i64) -> bool {
        // 1970-01-01 was a Thursday; Monday = 0
        let dow = (day + 3).rem_euclid(7);
        match self {
            DayFilter::All => true,
            DayFilter::Weekday => dow < 5,
            DayFilter::Weekend => dow >= 5,
        }
    }
}

impl FromStr for DayFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weekday" | "weekdays" => Ok(DayFilter::Weekday),
            "weekend" | "weekends" => Ok(DayFilter::Weekend),
            "all" => Ok(DayFilter::All),
            other => Err(Error::Config(format!("unknown day filter `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub day_filter: DayFilter,
    /// Added to every epoch before slot and day mapping.
    pub utc_offset_s: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedOrders {
    pub orders: Vec<OrderRecord>,
    pub dropped_out_of_bounds: usize,
    pub dropped_by_day: usize,
}

pub fn load_orders(path: impl AsRef<Path>, grid: &GridSpec, day_filter: DayFilter) -> Result<LoadedOrders> {
    load_orders_with(path, grid, LoadOptions { day_filter, utc_offset_s: 0 })
}

pub fn load_orders_with(path: impl AsRef<Path>, grid: &GridSpec, opts: LoadOptions) -> Result<LoadedOrders> {
    read_orders(File::open(path)?, grid, opts)
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing column `{}`", ORDER_HEADER[i]),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value `{raw}` for `{}`", ORDER_HEADER[i]),
    })
}

fn coord(rec: &csv::StringRecord, i: usize, line: u64) -> Result<f64> {
    let v: f64 = field(rec, i, line)?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite `{}`", ORDER_HEADER[i]) });
    }
    Ok(v)
}

pub fn read_orders(reader: impl Read, grid: &GridSpec, opts: LoadOptions) -> Result<LoadedOrders> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(ORDER_HEADER.iter().copied()) {
        return Err(Error::Schema(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = LoadedOrders::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != ORDER_HEADER.len() {
            return Err(Error::Parse { line, msg: format!("expected 7 columns, found {}", rec.len()) });
        }
        let order_id = rec[0].trim().to_string();
        let dep_epoch = field::<i64>(&rec, 1, line)? + opts.utc_offset_s;
        let (dep_lng, dep_lat) = (coord(&rec, 2, line)?, coord(&rec, 3, line)?);
        let (des_lng, des_lat) = (coord(&rec, 4, line)?, coord(&rec, 5, line)?);
        let arr_epoch = field::<i64>(&rec, 6, line)? + opts.utc_offset_s;
        if arr_epoch < dep_epoch {
            return Err(Error::Parse { line, msg: "arrival precedes departure".into() });
        }
        let (Ok(dep_block), Ok(des_block)) = (grid.block_of(dep_lng, dep_lat), grid.block_of(des_lng, des_lat))
        else {
            out.dropped_out_of_bounds += 1;
            continue;
        };
        if !opts.day_filter.accepts(day_of(dep_epoch)) {
            out.dropped_by_day += 1;
            continue;
        }
        out.orders.push(OrderRecord {
            order_id,
            dep_slot: grid.slot_of(dep_epoch),
            dep_block,
            des_block,
            dep_lng,
            dep_lat,
            des_lng,
            des_lat,
            arr_slot: grid.slot_of(arr_epoch),
            dep_epoch,
            arr_epoch,
        });
    }
    Ok(out)
}

/// Writes orders in the 7-column schema, undoing `utc_offset_s`.
pub fn write_orders(writer: impl Write, orders: &[OrderRecord], utc_offset_s: i64) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(ORDER_HEADER).map_err(csv_err)?;
    for o in orders {
        w.write_record([
            o.order_id.clone(),
            (o.dep_epoch - utc_offset_s).to_string(),
            o.dep_lng.to_string(),
            o.dep_lat.to_string(),
            o.des_lng.to_string(),
            o.des_lat.to_string(),
            (o.arr_epoch - utc_offset_s).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_orders(path: impl AsRef<Path>, orders: &[OrderRecord]) -> Result<()> {
    write_orders(std::io::BufWriter::new(File::create(path)?), orders, 0)
}
