use kws_core::calib::{combine_segments, gamma, kappa, nearest_center, nu, CombinedRows};
use kws_core::fixtures::{make_center_bank, make_query, ToyWorldConfig};
use kws_core::{CenterBank, EmbeddingSequence, SegmentLayout};
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.iter().map(|x| (x / n) as f32).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn bank_and_rows() -> impl Strategy<Value = (CenterBank, EmbeddingSequence)> {
    (2usize..12, 1usize..3, 1usize..3, 1usize..3, 1usize..6).prop_flat_map(|(dim, k, p, c, t)| {
        let centers = prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), k * p * c);
        let rows = prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), t);
        (centers, rows).prop_map(move |(cs, rs)| {
            let flat = cs.into_iter().flat_map(unit).collect();
            let names = (0..k).map(|i| format!("k{i}")).collect();
            let bank = CenterBank::new(flat, dim, p, c, names).unwrap();
            let rows: Vec<Vec<f32>> = rs.into_iter().map(unit).collect();
            (bank, EmbeddingSequence::from_rows(&rows, 0.01, None).unwrap())
        })
    })
}

proptest! {
    #[test]
    fn kappa_lands_on_bank_centers((bank, seq) in bank_and_rows()) {
        let q = kappa(&seq, &bank).unwrap();
        for (t, row) in q.rows().enumerate() {
            let nc = nearest_center(seq.row(t), &bank).unwrap();
            prop_assert_eq!(row, bank.center(nc.index));
        }
    }

    #[test]
    fn nu_keeps_direction_and_shrinks_with_similarity((bank, seq) in bank_and_rows()) {
        let n = nu(&seq, &bank).unwrap();
        let mut pairs = Vec::new();
        for t in 0..seq.len() {
            let e = seq.row(t);
            let r = n.row(t);
            let norm = dot(r, r).sqrt();
            prop_assert!((dot(r, e) / norm - 1.0).abs() < 1e-5);
            pairs.push((nearest_center(e, &bank).unwrap().similarity, norm));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            prop_assert!(w[1].1 <= w[0].1 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn gamma_is_kappa_plus_nu((bank, seq) in bank_and_rows()) {
        let (g, q, n) = (gamma(&seq, &bank).unwrap(), kappa(&seq, &bank).unwrap(), nu(&seq, &bank).unwrap());
        for t in 0..seq.len() {
            for ((a, b), c) in g.row(t).iter().zip(q.row(t)).zip(n.row(t)) {
                prop_assert!((a - (b + c)).abs() <= 1e-6 * (1.0 + c.abs()));
            }
        }
    }

    #[test]
    fn combining_consistent_segments_recovers_sequence(
        (_, seq) in bank_and_rows(),
        len in 1usize..6,
        hop_frac in 0.0f64..1.0,
    ) {
        let len = len.min(seq.len());
        let hop = 1 + ((len - 1) as f64 * hop_frac) as usize;
        let layout = SegmentLayout::new(len, hop).unwrap();
        let mut segments = Vec::new();
        let mut start = 0;
        loop {
            let rows: Vec<Vec<f32>> = (start..start + len).map(|t| seq.row(t.min(seq.len() - 1)).to_vec()).collect();
            segments.push(EmbeddingSequence::from_rows(&rows, 0.01, None).unwrap());
            if start + len >= seq.len() {
                break;
            }
            start += hop;
        }
        let out = combine_segments(&segments, layout, seq.len(), CombinedRows::UnitNorm).unwrap();
        for t in 0..seq.len() {
            for (a, b) in out.row(t).iter().zip(seq.row(t)) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn quantization_removes_small_perturbations() {
    // noisy template frames snap back onto the center they were drawn from
    let clean = ToyWorldConfig::default();
    let noisy = ToyWorldConfig {
        noise_sigma: 0.02,
        ..clean.clone()
    };
    let bank = make_center_bank(&clean).unwrap();
    for kw in 0..clean.n_keywords {
        let a = make_query(&clean, &bank, kw, 0).unwrap();
        let b = make_query(&noisy, &bank, kw, 0).unwrap();
        assert_ne!(a, b);
        assert_eq!(kappa(&a, &bank).unwrap(), kappa(&b, &bank).unwrap());
    }
}
