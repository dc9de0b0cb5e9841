//! Relative positional bucketing.
//!
//! Tokens are grouped into a fixed number of buckets by their signed
//! distance to the nearest anchor: anchors get singleton buckets, nearby
//! tokens get small buckets, and distant tokens share logarithmically wider
//! ones. Each bucket's embedding is the mean of its members.

use std::ops::Range;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::io::{encode_container, write_atomic};

/// Bucket id for signed relative position `r` with `b` buckets and maximum
/// distance `d`.
///
/// Non-positive positions land in `[0, b/2)`, positive ones in `[b/2, b)`.
/// Within a side the first `b/4` distances are exact and the rest grow
/// logarithmically up to `d`, beyond which everything shares the side's last
/// bucket.
pub fn relative_bucket(r: i64, b: usize, d: usize) -> Result<usize> {
    if b < 4 || !b.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "bucket count must be even and >= 4, got {b}"
        )));
    }
    if 4 * d <= b {
        return Err(Error::InvalidArgument(format!(
            "max distance {d} must exceed b/4 = {}",
            b as f64 / 4.0
        )));
    }
    let half = b / 2;
    let offset = if r > 0 { half } else { 0 };
    let dist = r.unsigned_abs() as usize;
    let exact = half / 2;
    if dist < exact {
        return Ok(offset + dist);
    }
    let span = (half - exact) as f64;
    let x = span * ((dist as f64 / exact as f64).ln() / (d as f64 / exact as f64).ln());
    // Log ratios of integers land exactly on integers often (powers of two);
    // absorb the rounding error of `ln` before flooring.
    let step = (x + 1e-9).floor() as usize;
    Ok(offset + (exact + step).min(half - 1))
}

/// A span of tokens owning exactly one anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub range: Range<usize>,
    pub anchor: usize,
    /// Buckets assigned to this segment.
    pub local_budget: usize,
    /// Largest `|p - anchor|` over the segment.
    pub max_distance: usize,
}

impl Segment {
    fn new(range: Range<usize>, anchor: usize) -> Self {
        let max_distance = (anchor - range.start).max(range.end - 1 - anchor);
        Segment {
            range,
            anchor,
            local_budget: 0,
            max_distance,
        }
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    fn min_budget(&self) -> usize {
        self.len().min(3)
    }
}

fn validate_anchors(anchors: &[usize], n: usize) -> Result<()> {
    if let Some(&last) = anchors.last() {
        if last >= n {
            return Err(Error::InvalidArgument(format!("anchor {last} >= n = {n}")));
        }
    }
    if anchors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "anchor positions must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Splits `[0, n)` at the midpoints between adjacent anchors.
///
/// The right segment starts at `i_j + ⌊(i_{j+1} - i_j) / 2⌋`, or at
/// `i_{j+1}` when the anchors are adjacent.
pub fn segment_boundaries(anchors: &[usize], n: usize) -> Result<Vec<Segment>> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no anchors".into()));
    }
    validate_anchors(anchors, n)?;
    let mut segments = Vec::with_capacity(anchors.len());
    let mut start = 0;
    for (j, &a) in anchors.iter().enumerate() {
        let end = match anchors.get(j + 1) {
            Some(&next) => (a + (next - a) / 2).max(a + 1),
            None => n,
        };
        segments.push(Segment::new(start..end, a));
        start = end;
    }
    Ok(segments)
}

/// Distributes `c` buckets over the segments in proportion to their lengths.
///
/// Budgets are clamped to `[min(3, len), len]` and always sum to
/// `min(c, n)`.
pub fn allocate_buckets(mut segments: Vec<Segment>, c: usize) -> Result<Vec<Segment>> {
    let n: usize = segments.iter().map(Segment::len).sum();
    if n <= c {
        for s in &mut segments {
            s.local_budget = s.len();
        }
        return Ok(segments);
    }
    let required: usize = segments.iter().map(Segment::min_budget).sum();
    if required > c {
        return Err(Error::InfeasibleBudget {
            budget: c,
            segments: segments.len(),
            required,
        });
    }

    // Largest-remainder rounding of c * len / n.
    let mut budgets: Vec<usize> = segments.iter().map(|s| c * s.len() / n).collect();
    let assigned: usize = budgets.iter().sum();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = c * segments[a].len() % n;
        let rb = c * segments[b].len() % n;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(c - assigned) {
        budgets[i] += 1;
    }

    for (b, s) in budgets.iter_mut().zip(&segments) {
        *b = (*b).clamp(s.min_budget(), s.len());
    }

    // Push the clamped total back to c, one bucket at a time, where the gap
    // to the proportional share is largest.
    let target = |i: usize| (c * segments[i].len()) as f64 / n as f64;
    let mut total: usize = budgets.iter().sum();
    while total < c {
        let i = (0..segments.len())
            .filter(|&i| budgets[i] < segments[i].len())
            .max_by(|&a, &b| {
                let ga = target(a) - budgets[a] as f64;
                let gb = target(b) - budgets[b] as f64;
                ga.total_cmp(&gb)
                    .then(segments[a].len().cmp(&segments[b].len()))
                    .then(b.cmp(&a))
            })
            .expect("n > c leaves room");
        budgets[i] += 1;
        total += 1;
    }
    while total > c {
        let i = (0..segments.len())
            .filter(|&i| budgets[i] > segments[i].min_budget())
            .max_by(|&a, &b| {
                let sa = budgets[a] as f64 - target(a);
                let sb = budgets[b] as f64 - target(b);
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .expect("feasibility checked");
        budgets[i] -= 1;
        total -= 1;
    }
    for (s, b) in segments.iter_mut().zip(budgets) {
        s.local_budget = b;
    }
    Ok(segments)
}

/// Token → bucket map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub bucket_of: Vec<usize>,
    pub n_buckets: usize,
    pub anchors: Vec<usize>,
    /// Set when no anchors were given and uniform pooling was used.
    pub uniform_fallback: bool,
}

impl BucketAssignment {
    /// Every token in its own bucket.
    pub fn identity(n: usize, anchors: &[usize]) -> Self {
        BucketAssignment {
            bucket_of: (0..n).collect(),
            n_buckets: n,
            anchors: anchors.to_vec(),
            uniform_fallback: false,
        }
    }

    /// `min(c, n)` equal contiguous runs.
    pub fn uniform(n: usize, c: usize) -> Self {
        let k = c.min(n);
        let bucket_of = (0..n).map(|p| p * k / n).collect();
        BucketAssignment {
            bucket_of,
            n_buckets: k,
            anchors: Vec::new(),
            uniform_fallback: true,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.bucket_of.len()
    }

    pub fn is_identity(&self) -> bool {
        self.n_buckets == self.bucket_of.len()
    }

    /// Member ranges per bucket, in bucket order.
    pub fn bucket_ranges(&self) -> Vec<Range<usize>> {
        let mut out: Vec<Range<usize>> = Vec::with_capacity(self.n_buckets);
        for (p, &b) in self.bucket_of.iter().enumerate() {
            if b == out.len() {
                out.push(p..p + 1);
            } else {
                out[b].end = p + 1;
            }
        }
        out
    }

    /// CSV rows `(position, bucket_id, is_anchor)`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["position", "bucket_id", "is_anchor"])?;
        let mut anchors = self.anchors.iter().peekable();
        for (p, &b) in self.bucket_of.iter().enumerate() {
            let is_anchor = anchors.next_if(|&&a| a == p).is_some();
            w.write_record([p.to_string(), b.to_string(), u8::from(is_anchor).to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii"))
    }
}

/// Splits distances `1..=dist` on one side of an anchor into exactly `budget`
/// contiguous groups, returned as group lengths ordered from the anchor out.
fn side_groups(dist: usize, budget: usize, sign: i64) -> Result<Vec<usize>> {
    debug_assert!(budget >= 1 && budget <= dist);
    if budget == dist {
        return Ok(vec![1; dist]);
    }
    let b = 2 * (budget + 1);
    let d = dist + 1;
    let offset = if sign > 0 { b / 2 } else { 0 };
    let mut groups: Vec<usize> = Vec::with_capacity(budget);
    let mut prev = None;
    for r in 1..=dist {
        let id = relative_bucket(sign * r as i64, b, d)? - offset;
        if prev == Some(id) {
            *groups.last_mut().unwrap() += 1;
        } else {
            groups.push(1);
            prev = Some(id);
        }
    }
    // The log scale can skip ids near the anchor; split the widest group
    // (nearest first on ties) until the budget is met.
    while groups.len() < budget {
        let (i, _) = groups
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let len = groups[i];
        let near = len / 2;
        groups[i] = near;
        groups.insert(i + 1, len - near);
    }
    Ok(groups)
}

/// Group lengths covering one segment in position order.
fn segment_groups(seg: &Segment) -> Result<Vec<usize>> {
    let len = seg.len();
    let budget = seg.local_budget;
    if budget >= len {
        return Ok(vec![1; len]);
    }
    let left = seg.anchor - seg.range.start;
    let right = seg.range.end - 1 - seg.anchor;
    let rest = budget - 1;
    let (bl, br) = if left == 0 {
        (0, rest)
    } else if right == 0 {
        (rest, 0)
    } else {
        let share = ((rest * left) as f64 / (left + right) as f64).round() as usize;
        let lo = 1.max(rest.saturating_sub(right));
        let hi = left.min(rest - 1);
        let bl = share.clamp(lo, hi);
        (bl, rest - bl)
    };
    let mut out = Vec::with_capacity(budget);
    if bl > 0 {
        let mut g = side_groups(left, bl, -1)?;
        g.reverse();
        out.extend(g);
    }
    out.push(1);
    if br > 0 {
        out.extend(side_groups(right, br, 1)?);
    }
    Ok(out)
}

/// Buckets every token of a length-`n` sequence into `min(c, n)` buckets.
pub fn assign_buckets(n: usize, anchors: &[usize], c: usize) -> Result<BucketAssignment> {
    if c == 0 {
        return Err(Error::InvalidArgument("bucket budget must be >= 1".into()));
    }
    if n == 0 {
        return Ok(BucketAssignment::identity(0, &[]));
    }
    if anchors.is_empty() {
        log::warn!("no anchors: falling back to uniform pooling into {} buckets", c.min(n));
        return Ok(BucketAssignment::uniform(n, c));
    }
    validate_anchors(anchors, n)?;
    if n <= c {
        return Ok(BucketAssignment::identity(n, anchors));
    }
    let segments = allocate_buckets(segment_boundaries(anchors, n)?, c)?;
    let mut bucket_of = Vec::with_capacity(n);
    let mut next = 0;
    for seg in &segments {
        for len in segment_groups(seg)? {
            bucket_of.extend(std::iter::repeat_n(next, len));
            next += 1;
        }
    }
    debug_assert_eq!(bucket_of.len(), n);
    Ok(BucketAssignment {
        bucket_of,
        n_buckets: next,
        anchors: anchors.to_vec(),
        uniform_fallback: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedSequence {
    /// `[n_buckets × d_model]`.
    pub embeddings: Mat,
    pub assignment: BucketAssignment,
    pub bucket_positions: Vec<usize>,
}

#[derive(Serialize)]
struct CompressedHeader<'a> {
    n: usize,
    c: usize,
    d_model: usize,
    anchor_positions: &'a [usize],
    uniform_fallback: bool,
}

impl CompressedSequence {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CompressedHeader {
            n: self.assignment.n_tokens(),
            c: self.assignment.n_buckets,
            d_model: self.embeddings.ncols(),
            anchor_positions: &self.assignment.anchors,
            uniform_fallback: self.assignment.uniform_fallback,
        };
        let payload: Vec<f64> = self.embeddings.iter().copied().collect();
        encode_container(&header, &payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Mean-pools embedding rows per bucket. Singleton buckets are copied, so
/// anchor rows pass through unchanged bit for bit.
pub fn compress_sequence(
    embeddings: ArrayView2<'_, f64>,
    assignment: &BucketAssignment,
) -> Result<CompressedSequence> {
    if embeddings.nrows() != assignment.n_tokens() {
        return Err(Error::shape(
            "compress_sequence",
            format!("{} rows for {} tokens", embeddings.nrows(), assignment.n_tokens()),
        ));
    }
    let mut out = Mat::zeros((assignment.n_buckets, embeddings.ncols()));
    for (b, range) in assignment.bucket_ranges().into_iter().enumerate() {
        let mut row = out.row_mut(b);
        row.assign(&embeddings.row(range.start));
        if range.len() > 1 {
            for p in range.start + 1..range.end {
                row += &embeddings.row(p);
            }
            let k = range.len() as f64;
            row.mapv_inplace(|v| v / k);
        }
    }
    Ok(CompressedSequence {
        embeddings: out,
        assignment: assignment.clone(),
        bucket_positions: (0..assignment.n_buckets).collect(),
    })
}
