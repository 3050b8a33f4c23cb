use prpo_core::{segment, segment_random, segment_uniform, token_entropy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Line-by-line transcription of the entropy segmentation pseudocode, with
/// no shortcuts: full sort for top-k, distance checked against every kept
/// anchor.
fn naive_segmentation(
    entropies: &[f64],
    start_idx: usize,
    out_len: usize,
    max_branches: usize,
    min_gap: usize,
) -> Vec<(usize, usize)> {
    if out_len - start_idx < max_branches + 1 {
        return vec![(start_idx, out_len)];
    }

    let mut order: Vec<usize> = (0..out_len - start_idx).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (entropies[start_idx + a], entropies[start_idx + b]);
        eb.partial_cmp(&ea).unwrap().then(a.cmp(&b))
    });
    let mut anchors: Vec<usize> = order.into_iter().take(max_branches).collect();
    for a in anchors.iter_mut() {
        *a += start_idx;
    }
    anchors.sort();

    let mut filtered: Vec<usize> = Vec::new();
    for &anchor in &anchors {
        let far = filtered
            .iter()
            .all(|&kept: &usize| (anchor as i64 - kept as i64).abs() >= min_gap as i64);
        if far {
            filtered.push(anchor);
        }
    }

    let mut cuts = Vec::new();
    let mut last_cut = start_idx;
    for &a in &filtered {
        if a as i64 - last_cut as i64 >= min_gap as i64 {
            cuts.push(a);
            last_cut = a;
        }
    }

    let mut segments = Vec::new();
    let mut prev = start_idx;
    for &c in &cuts {
        segments.push((prev, c));
        prev = c;
    }
    segments.push((prev, out_len));

    let mut sanitized = Vec::new();
    let mut cur = start_idx;
    for (s, e) in segments {
        let s = start_idx.max(out_len.min(s));
        let e = start_idx.max(out_len.min(e));
        if e <= s {
            continue;
        }
        if s > cur {
            sanitized.push((cur, s));
        }
        sanitized.push((s, e));
        cur = e;
    }
    if cur < out_len {
        sanitized.push((cur, out_len));
    }
    if sanitized.is_empty() {
        return vec![(start_idx, out_len)];
    }
    sanitized
}

fn random_entropies(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // a mix of continuous values and a small alphabet of ties
    if rng.random_bool(0.3) {
        (0..n).map(|_| rng.random_range(0..4) as f64 * 0.5).collect()
    } else {
        (0..n).map(|_| rng.random_range(0.0..3.0)).collect()
    }
}

#[test]
fn matches_naive_transcription_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let len = rng.random_range(1..=200);
        let h = random_entropies(&mut rng, len);
        let start = if rng.random_bool(0.5) { 0 } else { rng.random_range(0..len) };
        let got = segment(&h, start, len, 5, 10).unwrap();
        let want = naive_segmentation(&h, start, len, 5, 10);
        assert_eq!(got.ranges(), want.as_slice(), "case {case}: len {len} start {start}");
    }
}

#[test]
fn matches_naive_transcription_for_other_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let len = rng.random_range(1..=80);
        let h = random_entropies(&mut rng, len);
        let k = rng.random_range(1..=8);
        let gap = rng.random_range(1..=12);
        let got = segment(&h, 0, len, k, gap).unwrap();
        assert_eq!(got.ranges(), naive_segmentation(&h, 0, len, k, gap).as_slice());
    }
}

#[test]
fn spike_trace() {
    let mut h = vec![0.0; 40];
    h[5] = 3.0;
    h[17] = 2.0;
    h[29] = 1.0;
    let s = segment(&h, 0, 40, 3, 10).unwrap();
    assert_eq!(s.ranges(), &[(0, 17), (17, 29), (29, 40)]);
}

#[test]
fn random_split_over_many_seeds_has_six_parts_and_spacing() {
    for seed in 0..1000 {
        let s = segment_random(100, 0, 5, 10, seed).unwrap();
        assert_eq!(s.len(), 6, "seed {seed}");
        assert_eq!((s.start(), s.end()), (0, 100));
        let cuts = s.cuts();
        for w in cuts.windows(2) {
            assert!(w[1] - w[0] >= 10);
        }
    }
}

fn assert_tiles(ranges: &[(usize, usize)], start: usize, end: usize) {
    assert!(!ranges.is_empty());
    assert_eq!(ranges[0].0, start);
    assert_eq!(ranges.last().unwrap().1, end);
    for w in ranges.windows(2) {
        assert_eq!(w[0].1, w[1].0);
    }
    assert!(ranges.iter().all(|&(s, e)| s < e));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn entropy_segments_tile_and_respect_gap(
        h in prop::collection::vec(0.0f64..5.0, 1..150),
        start_frac in 0.0f64..1.0,
        k in 1usize..8,
        gap in 1usize..15,
    ) {
        let len = h.len();
        let start = ((len as f64 * start_frac) as usize).min(len - 1);
        let s = segment(&h, start, len, k, gap).unwrap();
        assert_tiles(s.ranges(), start, len);
        let mut last = start;
        for c in s.cuts() {
            prop_assert!(c - last >= gap);
            last = c;
        }
    }

    #[test]
    fn random_and_uniform_segments_tile(
        len in 1usize..150,
        start_frac in 0.0f64..1.0,
        k in 1usize..8,
        gap in 1usize..15,
        seed in any::<u64>(),
    ) {
        let start = ((len as f64 * start_frac) as usize).min(len - 1);
        let r = segment_random(len, start, k, gap, seed).unwrap();
        assert_tiles(r.ranges(), start, len);
        prop_assert_eq!(&r, &segment_random(len, start, k, gap, seed).unwrap());
        let u = segment_uniform(len, start, k).unwrap();
        assert_tiles(u.ranges(), start, len);
        let sizes: Vec<usize> = u.ranges().iter().map(|&(s, e)| e - s).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn entropy_is_bounded_by_log_support(raw in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h = token_entropy(&p).unwrap();
        let bound = (p.len() as f64).ln();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= bound + 1e-9);
        if bound - h < 1e-9 {
            let max_dev = p.iter().map(|&x| (x - 1.0 / p.len() as f64).abs()).fold(0.0, f64::max);
            prop_assert!(max_dev < 1e-4);
        }
    }
}

#[test]
fn uniform_vectors_reach_the_bound() {
    for n in 1..=32 {
        let p = vec![1.0 / n as f64; n];
        assert!((token_entropy(&p).unwrap() - (n as f64).ln()).abs() < 1e-9);
    }
}
