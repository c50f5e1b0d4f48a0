//! Order-book snapshots, the weighted average price (WAP) and realized
//! volatility of a WAP series.
//!
//! The WAP here is the mean of the size-weighted bid price and the
//! size-weighted ask price:
//!
//! ```text
//! P_bid = sum(bid_price_j * bid_size_j) / sum(bid_size_j)
//! P_ask = sum(ask_price_k * ask_size_k) / sum(ask_size_k)
//! WAP   = (P_bid + P_ask) / 2
//! ```
//!
//! This is not the cross-weighted micro-price
//! `(bid * ask_size + ask * bid_size) / (bid_size + ask_size)` used by many
//! order-book datasets; the two differ whenever the book is imbalanced.
//!
//! Snapshot files are CSV with header `time_id,side,level,price,size`, where
//! `side` is `bid` or `ask`. Rows are grouped into one snapshot per `time_id`
//! and must appear in nondecreasing `time_id` order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub price: f64,
    pub size: f64,
}

impl Level {
    pub fn new(price: f64, size: f64) -> Self {
        Self { price, size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderBookSnapshot {
    pub time_id: u64,
    pub bids: Vec<Level>,
    pub asks: Vec<Level>,
}

impl OrderBookSnapshot {
    pub fn new(time_id: u64, bids: Vec<Level>, asks: Vec<Level>) -> Self {
        Self { time_id, bids, asks }
    }

    /// Best bid above best ask. Such books are still priced.
    pub fn is_crossed(&self) -> bool {
        let best_bid = self.bids.iter().map(|l| l.price).fold(f64::NEG_INFINITY, f64::max);
        let best_ask = self.asks.iter().map(|l| l.price).fold(f64::INFINITY, f64::min);
        best_bid > best_ask
    }

    fn check(&self) -> Result<()> {
        let malformed = |reason: String| HedgeError::MalformedSnapshot {
            time_id: self.time_id,
            reason,
        };
        if self.bids.is_empty() {
            return Err(malformed("no bid levels".into()));
        }
        if self.asks.is_empty() {
            return Err(malformed("no ask levels".into()));
        }
        for l in self.bids.iter().chain(&self.asks) {
            if !(l.price > 0.0 && l.price.is_finite() && l.size > 0.0 && l.size.is_finite()) {
                return Err(malformed(format!(
                    "level price {} size {} must both be positive",
                    l.price, l.size
                )));
            }
        }
        Ok(())
    }
}

fn side_average(levels: &[Level]) -> f64 {
    let mut value = 0.0;
    let mut volume = 0.0;
    for l in levels {
        value += l.price * l.size;
        volume += l.size;
    }
    value / volume
}

/// Weighted average price of one snapshot.
pub fn wap(snapshot: &OrderBookSnapshot) -> Result<f64> {
    snapshot.check()?;
    Ok((side_average(&snapshot.bids) + side_average(&snapshot.asks)) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WapSeries {
    pub source_id: String,
    pub time_ids: Vec<u64>,
    pub values: Vec<f64>,
    /// Number of crossed books that were priced anyway.
    pub crossed_books: usize,
}

impl WapSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `time_id,wap`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time_id,wap")?;
        for (t, v) in self.time_ids.iter().zip(&self.values) {
            writeln!(out, "{t},{v}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// WAP per snapshot, in order. Non-positive WAPs are dropped.
pub fn build_wap_series(snapshots: &[OrderBookSnapshot], source_id: impl Into<String>) -> Result<WapSeries> {
    let mut series = WapSeries {
        source_id: source_id.into(),
        time_ids: Vec::with_capacity(snapshots.len()),
        values: Vec::with_capacity(snapshots.len()),
        crossed_books: 0,
    };
    let mut previous: Option<u64> = None;
    for snap in snapshots {
        if let Some(prev) = previous {
            if snap.time_id <= prev {
                return Err(HedgeError::Ordering {
                    previous: prev,
                    current: snap.time_id,
                });
            }
        }
        previous = Some(snap.time_id);
        let value = wap(snap)?;
        if snap.is_crossed() {
            series.crossed_books += 1;
        }
        if value > 0.0 {
            series.time_ids.push(snap.time_id);
            series.values.push(value);
        }
    }
    Ok(series)
}

/// Annualized standard deviation of log returns,
/// `sqrt(sample_variance(ln(P[i+1] / P[i])) / dt_years)`.
pub fn realized_vol(series: &WapSeries, dt_years: f64) -> Result<f64> {
    if series.len() < 3 {
        return Err(HedgeError::InsufficientData {
            needed: 3,
            got: series.len(),
        });
    }
    if !(dt_years > 0.0) {
        return Err(HedgeError::Input(format!("dt_years must be > 0, got {dt_years}")));
    }
    let returns: Vec<f64> = series.values.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((var / dt_years).sqrt())
}

pub fn parse_orderbook_file(path: impl AsRef<Path>) -> Result<Vec<OrderBookSnapshot>> {
    let file = std::fs::File::open(path)?;
    parse_orderbook(file)
}

const COLUMNS: [&str; 5] = ["time_id", "side", "level", "price", "size"];

/// Parses the snapshot CSV from any reader.
pub fn parse_orderbook<R: Read>(reader: R) -> Result<Vec<OrderBookSnapshot>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers().map_err(|e| csv_err(1, e))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(HedgeError::Parse {
            line: 1,
            reason: "empty file, expected header `time_id,side,level,price,size`".into(),
        });
    }
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HedgeError::Parse {
                line: 1,
                reason: format!("missing column `{name}`"),
            })?;
    }

    // (level, price, size) per side, sorted by level once the snapshot closes.
    let mut snapshots: Vec<OrderBookSnapshot> = Vec::new();
    let mut bids: Vec<(u32, Level)> = Vec::new();
    let mut asks: Vec<(u32, Level)> = Vec::new();
    let mut current: Option<u64> = None;

    let flush =
        |time_id: u64, bids: &mut Vec<(u32, Level)>, asks: &mut Vec<(u32, Level)>, out: &mut Vec<OrderBookSnapshot>| {
            bids.sort_by_key(|(lvl, _)| *lvl);
            asks.sort_by_key(|(lvl, _)| *lvl);
            out.push(OrderBookSnapshot {
                time_id,
                bids: bids.drain(..).map(|(_, l)| l).collect(),
                asks: asks.drain(..).map(|(_, l)| l).collect(),
            });
        };

    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(line, e)
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(idx[i]).unwrap_or("");
        let parse_err = |reason: String| HedgeError::Parse { line, reason };

        let time_id: u64 = field(0)
            .parse()
            .map_err(|_| parse_err(format!("time_id `{}` is not an integer", field(0))))?;
        let level: u32 = field(2)
            .parse()
            .map_err(|_| parse_err(format!("level `{}` is not an integer", field(2))))?;
        let price: f64 = field(3)
            .parse()
            .map_err(|_| parse_err(format!("price `{}` is not numeric", field(3))))?;
        let size: f64 = field(4)
            .parse()
            .map_err(|_| parse_err(format!("size `{}` is not numeric", field(4))))?;
        if !(price > 0.0 && price.is_finite()) {
            return Err(parse_err(format!("price must be positive, got {price}")));
        }
        if !(size > 0.0 && size.is_finite()) {
            return Err(parse_err(format!("size must be positive, got {size}")));
        }

        match current {
            Some(t) if t == time_id => {}
            Some(t) if time_id < t => {
                return Err(parse_err(format!(
                    "time_id {time_id} after {t}; rows must be ordered by time_id"
                )));
            }
            Some(t) => {
                flush(t, &mut bids, &mut asks, &mut snapshots);
                current = Some(time_id);
            }
            None => current = Some(time_id),
        }

        let entry = (level, Level { price, size });
        match field(1) {
            "bid" => bids.push(entry),
            "ask" => asks.push(entry),
            other => return Err(parse_err(format!("side must be `bid` or `ask`, got `{other}`"))),
        }
    }

    match current {
        Some(t) => flush(t, &mut bids, &mut asks, &mut snapshots),
        None => {
            return Err(HedgeError::Parse {
                line: 2,
                reason: "no data rows".into(),
            })
        }
    }
    Ok(snapshots)
}

fn csv_err(line: u64, e: csv::Error) -> HedgeError {
    HedgeError::Parse {
        line,
        reason: e.to_string(),
    }
}
