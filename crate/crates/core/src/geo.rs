//! Representative UTC offsets per country. The simulator and the analytics
//! module both convert UTC instants to local hour-of-day through this table.

use chrono::Timelike;

use crate::Timestamp;

const OFFSETS: &[(&str, f64)] = &[
    ("AR", -3.0),
    ("BD", 6.0),
    ("BR", -3.0),
    ("CO", -5.0),
    ("DE", 1.0),
    ("EG", 2.0),
    ("ES", 1.0),
    ("GB", 0.0),
    ("ID", 7.0),
    ("IN", 5.5),
    ("IT", 1.0),
    ("KE", 3.0),
    ("MX", -6.0),
    ("NG", 1.0),
    ("PH", 8.0),
    ("PK", 5.0),
    ("PL", 1.0),
    ("RO", 2.0),
    ("RS", 1.0),
    ("RU", 3.0),
    ("TR", 3.0),
    ("UA", 2.0),
    ("US", -5.0),
    ("VE", -4.0),
    ("VN", 7.0),
];

/// Offset in hours; unknown countries are treated as UTC.
pub fn utc_offset_hours(country: &str) -> f64 {
    OFFSETS
        .binary_search_by(|(c, _)| (*c).cmp(country))
        .map(|i| OFFSETS[i].1)
        .unwrap_or(0.0)
}

/// Local hour of day in `[0, 24)`, fractional.
pub fn local_hour(t: &Timestamp, country: &str) -> f64 {
    let utc = f64::from(t.hour())
        + f64::from(t.minute()) / 60.0
        + f64::from(t.second()) / 3600.0
        + f64::from(t.timestamp_subsec_millis()) / 3_600_000.0;
    (utc + utc_offset_hours(country)).rem_euclid(24.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_sorted() {
        assert!(OFFSETS.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn local_hours_wrap() {
        let t = crate::parse_time("2019-05-01T02:30:00Z").unwrap();
        assert_eq!(local_hour(&t, "VE"), 22.5);
        assert_eq!(local_hour(&t, "EG"), 4.5);
        assert_eq!(local_hour(&t, "ZZ"), 2.5);
    }
}
