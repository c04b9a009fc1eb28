//! Aggregated daily data: counts, covariates and calendar labels.

use std::io::{Read, Write};

use chrono::{Datelike, Days, NaiveDate, Weekday};

use crate::error::{Error, Result};
use crate::frames::weekday_of;

/// Daily case counts with named covariate columns.
///
/// Missing covariate values are stored as `NaN` (empty CSV cells).
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    y: Vec<u64>,
    covariates: Vec<(String, Vec<f64>)>,
    first_weekday: Weekday,
    start_date: Option<NaiveDate>,
}

const RESERVED: [&str; 4] = ["day", "date", "weekday", "y"];

impl DailySeries {
    pub fn new(y: Vec<u64>) -> Self {
        DailySeries {
            y,
            covariates: Vec::new(),
            first_weekday: Weekday::Sun,
            start_date: None,
        }
    }

    pub fn with_covariate(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != self.y.len() {
            return Err(Error::invalid(format!(
                "covariate {name:?} has {} values for {} days",
                values.len(),
                self.y.len()
            )));
        }
        if RESERVED.contains(&name.as_str()) || self.covariates.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate or reserved column name {name:?}")));
        }
        self.covariates.push((name, values));
        Ok(self)
    }

    /// Anchors day 1 at `date`; the weekday of day 1 follows.
    pub fn with_start_date(mut self, date: NaiveDate) -> Self {
        self.first_weekday = date.weekday();
        self.start_date = Some(date);
        self
    }

    pub fn with_first_weekday(mut self, weekday: Weekday) -> Self {
        self.first_weekday = weekday;
        self
    }

    pub fn n_days(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn total_count(&self) -> u64 {
        self.y.iter().sum()
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("data has no column {name:?}")))
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.iter().map(|(n, _)| n.as_str())
    }

    pub fn first_weekday(&self) -> Weekday {
        self.first_weekday
    }

    pub fn start_date(&self) -> Option<NaiveDate> {
        self.start_date
    }

    /// Weekday of 1-based `day`.
    pub fn weekday(&self, day: usize) -> Weekday {
        weekday_of(self.first_weekday, day)
    }

    pub fn date(&self, day: usize) -> Option<NaiveDate> {
        self.start_date
            .and_then(|d| d.checked_add_days(Days::new(day as u64 - 1)))
    }

    /// 1-based days on which any of `columns` is missing.
    pub fn incomplete_days(&self, columns: &[&str]) -> Result<Vec<usize>> {
        let cols = columns
            .iter()
            .map(|c| self.covariate(c))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.n_days())
            .filter(|&t| cols.iter().any(|c| c[t].is_nan()))
            .map(|t| t + 1)
            .collect())
    }

    /// Reads CSV with a required `y` column; `day`, `date` and `weekday` are
    /// optional calendar columns and every other column is a covariate.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let y_col = col("y").ok_or_else(|| Error::invalid("data CSV has no `y` column"))?;
        let day_col = col("day");
        let date_col = col("date");
        let weekday_col = col("weekday");
        let cov_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| !RESERVED.contains(h))
            .map(|(i, h)| (i, h.to_string()))
            .collect();

        let mut y = Vec::new();
        let mut covs: Vec<Vec<f64>> = vec![Vec::new(); cov_cols.len()];
        let mut dates: Vec<Option<NaiveDate>> = Vec::new();
        let mut first_weekday = None;
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let line = row + 2;
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let count = field(y_col).parse::<u64>().map_err(|_| {
                Error::invalid(format!("line {line}: `y` must be a nonnegative integer, got {:?}", field(y_col)))
            })?;
            y.push(count);
            if let Some(c) = day_col {
                let day: usize = field(c)
                    .parse()
                    .map_err(|_| Error::invalid(format!("line {line}: bad day index {:?}", field(c))))?;
                if day != row + 1 {
                    return Err(Error::invalid(format!(
                        "line {line}: day indices must run 1, 2, ... without gaps (got {day})"
                    )));
                }
            }
            dates.push(match date_col.map(field) {
                Some(s) if !s.is_empty() => Some(
                    s.parse::<NaiveDate>()
                        .map_err(|_| Error::invalid(format!("line {line}: bad date {s:?}")))?,
                ),
                _ => None,
            });
            if row == 0 {
                if let Some(c) = weekday_col {
                    let s = field(c);
                    if !s.is_empty() {
                        first_weekday = Some(
                            s.parse::<Weekday>()
                                .map_err(|_| Error::invalid(format!("line {line}: bad weekday {s:?}")))?,
                        );
                    }
                }
            }
            for (k, (i, name)) in cov_cols.iter().enumerate() {
                let s = field(*i);
                let v = if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
                    f64::NAN
                } else {
                    s.parse::<f64>().map_err(|_| {
                        Error::invalid(format!("line {line}: column {name:?} has non-numeric value {s:?}"))
                    })?
                };
                if v.is_infinite() {
                    return Err(Error::invalid(format!("line {line}: column {name:?} is infinite")));
                }
                covs[k].push(v);
            }
        }
        if y.is_empty() {
            return Err(Error::invalid("data CSV has no rows"));
        }
        let mut series = DailySeries::new(y);
        for ((_, name), values) in cov_cols.into_iter().zip(covs) {
            series = series.with_covariate(name, values)?;
        }
        if let Some(Some(start)) = dates.first() {
            for (t, d) in dates.iter().enumerate() {
                if *d != start.checked_add_days(Days::new(t as u64)) {
                    return Err(Error::invalid(format!(
                        "line {}: dates must be consecutive days",
                        t + 2
                    )));
                }
            }
            series = series.with_start_date(*start);
        } else if let Some(w) = first_weekday {
            series = series.with_first_weekday(w);
        }
        Ok(series)
    }

    /// Writes columns `day, date, weekday, y` followed by the covariates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["day".to_string(), "date".into(), "weekday".into(), "y".into()];
        header.extend(self.covariates.iter().map(|(n, _)| n.clone()));
        wtr.write_record(&header)?;
        for t in 0..self.n_days() {
            let day = t + 1;
            let mut row = vec![
                day.to_string(),
                self.date(day).map(|d| d.to_string()).unwrap_or_default(),
                self.weekday(day).to_string(),
                self.y[t].to_string(),
            ];
            for (_, v) in &self.covariates {
                row.push(if v[t].is_nan() { String::new() } else { v[t].to_string() });
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
