use crate::Scalar;

/// Running median over an odd window, edges extended by reflection about
/// the end samples (the end sample itself is not repeated).
pub fn running_median<T: Scalar>(x: &[T], window: usize) -> Vec<T> {
    debug_assert!(window % 2 == 1);
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let half = window / 2;
    let at = |i: isize| -> T { x[reflect_index(i, n)] };
    let mut sorted: Vec<T> = (-(half as isize)..=half as isize).map(at).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = Vec::with_capacity(n);
    out.push(sorted[half]);
    for i in 1..n as isize {
        let leaving = at(i - 1 - half as isize);
        let entering = at(i + half as isize);
        let pos = lower_bound(&sorted, leaving);
        sorted.remove(pos);
        let pos = lower_bound(&sorted, entering);
        sorted.insert(pos, entering);
        out.push(sorted[half]);
    }
    out
}

fn lower_bound<T: Scalar>(v: &[T], x: T) -> usize {
    v.partition_point(|&e| e < x)
}

/// Index into `0..n` for a possibly out-of-range position, reflecting
/// without repeating the boundary sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}
