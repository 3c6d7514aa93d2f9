use std::collections::BTreeMap;

use super::{ticks_as_seconds, SyncError, MAX_BINS};
use crate::timetag::{seconds_to_tick_delta, TimeTag};

/// Histogram of Bob-minus-Alice time differences.
///
/// Bin `h` counts pairs with
/// `center − half_span + h·bin <= t_b − t_a < center − half_span + (h+1)·bin`,
/// all in ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub center_ticks: i64,
    pub half_span_ticks: i64,
    pub bin_ticks: i64,
    pub counts: Vec<u32>,
    /// Detector tags of each side inside the overlap interval.
    pub n_a: usize,
    pub n_b: usize,
    /// Length of the interval covered by both sides, seconds.
    pub overlap: f64,
    /// Accidental pairs expected in one bin: `n_a·n_b·bin / overlap`.
    pub expected_per_bin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub bin: usize,
    /// Offset at the bin centre, ticks.
    pub offset_ticks: f64,
    pub count: u32,
    pub significance: f64,
}

impl Peak {
    pub fn offset(&self) -> f64 {
        self.offset_ticks * crate::timetag::TICK_SECONDS
    }
}

impl Correlation {
    pub fn bin_center_ticks(&self, h: usize) -> f64 {
        (self.center_ticks - self.half_span_ticks) as f64 + (h as f64 + 0.5) * self.bin_ticks as f64
    }

    pub fn significance_of(&self, count: f64) -> f64 {
        if self.expected_per_bin > 0.0 {
            count / self.expected_per_bin
        } else {
            0.0
        }
    }

    /// Highest bin; the earliest one wins ties.
    pub fn peak(&self) -> Peak {
        let (bin, &count) = self
            .counts
            .iter()
            .enumerate()
            .fold(
                (0, &0u32),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        Peak {
            bin,
            offset_ticks: self.bin_center_ticks(bin),
            count,
            significance: self.significance_of(count as f64),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Background-subtracted centroid of the bins within `radius_ticks` of
    /// bin `h`, in ticks. Falls back to the bin centre when nothing stands
    /// above the accidental level.
    pub fn centroid_around(&self, h: usize, radius_ticks: i64) -> f64 {
        let reach = (radius_ticks / self.bin_ticks.max(1)) as usize;
        let lo = h.saturating_sub(reach);
        let hi = (h + reach).min(self.counts.len() - 1);
        let (mut w, mut wx) = (0.0, 0.0);
        for i in lo..=hi {
            let excess = self.counts[i] as f64 - self.expected_per_bin;
            if excess > 0.0 {
                w += excess;
                wx += excess * self.bin_center_ticks(i);
            }
        }
        if w > 0.0 {
            wx / w
        } else {
            self.bin_center_ticks(h)
        }
    }
}

/// Cross-correlates two tag lists around `center` (seconds, Bob minus Alice)
/// over `±half_span` with bins of width `bin`. GPS markers are ignored.
pub fn cross_correlate(
    a: &[TimeTag],
    b: &[TimeTag],
    center: f64,
    half_span: f64,
    bin: f64,
) -> Result<Correlation, SyncError> {
    let ta = detector_ticks(a);
    let tb = detector_ticks(b);
    correlate_ticks(
        &ta,
        &tb,
        seconds_to_tick_delta(center),
        seconds_to_tick_delta(half_span),
        seconds_to_tick_delta(bin),
    )
}

pub(crate) fn detector_ticks(tags: &[TimeTag]) -> Vec<i64> {
    tags.iter()
        .filter(|t| !t.is_marker())
        .map(|t| t.ticks() as i64)
        .collect()
}

/// Integer-tick core of [`cross_correlate`]. Both inputs must be sorted.
pub fn correlate_ticks(
    a: &[i64],
    b: &[i64],
    center_ticks: i64,
    half_span_ticks: i64,
    bin_ticks: i64,
) -> Result<Correlation, SyncError> {
    if a.is_empty() || b.is_empty() {
        return Err(SyncError::EmptyBlock);
    }
    if bin_ticks <= 0 || half_span_ticks <= 0 {
        return Err(SyncError::InvalidConfig(
            "bin and span must be positive".into(),
        ));
    }
    let n_bins = (2 * half_span_ticks as u64).div_ceil(bin_ticks as u64);
    if n_bins > MAX_BINS {
        return Err(SyncError::TooManyBins(n_bins));
    }
    let width = n_bins as i64 * bin_ticks;
    let mut counts = vec![0u32; n_bins as usize];

    let mut j = 0usize;
    let mut last_lo = i64::MIN;
    for &ta in a {
        let lo = ta + center_ticks - half_span_ticks;
        if lo < last_lo {
            j = b.partition_point(|&x| x < lo);
        } else {
            while j < b.len() && b[j] < lo {
                j += 1;
            }
        }
        last_lo = lo;
        let hi = lo + width;
        for &tb in &b[j..] {
            if tb >= hi {
                break;
            }
            counts[((tb - lo) / bin_ticks) as usize] += 1;
        }
    }

    let ov_lo = a[0].max(b[0] - center_ticks);
    let ov_hi = a[a.len() - 1].min(b[b.len() - 1] - center_ticks);
    let (n_a, n_b, overlap) = if ov_hi > ov_lo {
        let n_a = a.partition_point(|&x| x <= ov_hi) - a.partition_point(|&x| x < ov_lo);
        let n_b = b.partition_point(|&x| x <= ov_hi + center_ticks)
            - b.partition_point(|&x| x < ov_lo + center_ticks);
        (n_a, n_b, ticks_as_seconds(ov_hi - ov_lo))
    } else {
        (0, 0, 0.0)
    };
    let expected_per_bin = if overlap > 0.0 {
        n_a as f64 * n_b as f64 * ticks_as_seconds(bin_ticks) / overlap
    } else {
        0.0
    };

    Ok(Correlation {
        center_ticks,
        half_span_ticks,
        bin_ticks,
        counts,
        n_a,
        n_b,
        overlap,
        expected_per_bin,
    })
}

/// Coarse offset (Bob minus Alice, seconds) from the GPS markers.
///
/// Markers are indexed by whole seconds elapsed since Alice's first marker;
/// Bob markers are indexed on the same grid, so the two streams may start up
/// to half a second apart. Returns the median difference over paired
/// markers.
pub fn coarse_align_markers(a: &[TimeTag], b: &[TimeTag]) -> Result<f64, SyncError> {
    let first = a
        .iter()
        .find(|t| t.is_marker())
        .ok_or(SyncError::NoMarkers)?
        .ticks() as i64;
    let index = |tags: &[TimeTag]| {
        let mut by_second = BTreeMap::new();
        for t in tags.iter().filter(|t| t.is_marker()) {
            let k = (ticks_as_seconds(t.ticks() as i64 - first)).round() as i64;
            by_second.entry(k).or_insert(t.ticks() as i64);
        }
        by_second
    };
    let ia = index(a);
    let ib = index(b);
    if ib.is_empty() {
        return Err(SyncError::NoMarkers);
    }
    let mut diffs: Vec<i64> = ia
        .iter()
        .filter_map(|(k, ta)| ib.get(k).map(|tb| tb - ta))
        .collect();
    if diffs.is_empty() {
        return Err(SyncError::NoMarkers);
    }
    diffs.sort_unstable();
    let n = diffs.len();
    let median = if n % 2 == 1 {
        diffs[n / 2] as f64
    } else {
        (diffs[n / 2 - 1] + diffs[n / 2]) as f64 / 2.0
    };
    Ok(median * crate::timetag::TICK_SECONDS)
}
