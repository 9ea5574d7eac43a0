//! Relative-position bucketing: signed buckets, exact for short distances,
//! logarithmic out to `max_distance`, clamped beyond.

/// Bucket index for a (query, key) position pair. Half the bins serve each
/// sign of the offset key - query; offsets with |delta| < bins/4 get their
/// own bucket, the rest share log-spaced buckets up to max_distance.
pub fn relpos_bucket(query_pos: usize, key_pos: usize, bins: usize, max_distance: usize) -> usize {
    debug_assert!(bins >= 4 && bins % 2 == 0);
    debug_assert!(max_distance > 0);
    let delta = key_pos as i64 - query_pos as i64;
    let half = bins / 2;
    let (mut bucket, n) = if delta > 0 {
        (half, delta as usize)
    } else {
        (0, (-delta) as usize)
    };
    let max_exact = half / 2;
    if n < max_exact {
        bucket += n;
    } else {
        let log_pos = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
        let offset = max_exact + (log_pos * (half - max_exact) as f64) as usize;
        bucket += offset.min(half - 1);
    }
    bucket
}

/// Dense [seq, seq] bucket table, row = query position.
pub fn bucket_table(seq: usize, bins: usize, max_distance: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(seq * seq);
    for i in 0..seq {
        for j in 0..seq {
            out.push(relpos_bucket(i, j, bins, max_distance) as u16);
        }
    }
    out
}
