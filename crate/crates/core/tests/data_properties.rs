use hesslens::data::{
    load_checkpoint, load_idx, read_report, save_checkpoint, save_idx, synth_blobs, write_report, BlobSpec, Cell,
    Checkpoint, CheckpointMeta, Dataset, Provenance, Report,
};
use hesslens::nn::{ModelConfig, ParamVector};
use hesslens::tensor::{dot, orthonormalize_against};
use hesslens::{Rng, Tensor};
use proptest::prelude::*;

fn provenance(seed: u64) -> Provenance {
    Provenance::Synthetic { seed, split: 0, n_per_class: 1, separation: 1.0, noise: 0.5 }
}

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

fn reparse(report: &Report) -> Vec<Vec<f64>> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_report(report, &path).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(back.columns, report.columns);
    assert_eq!(back.comments, report.comments);
    back.rows
        .iter()
        .map(|r| r.iter().map(|c| c.render().parse().unwrap()).collect())
        .collect()
}

#[test]
fn thousand_row_table_reparses_bit_equal() {
    let mut rng = Rng::new(41);
    let mut report = Report::new(&["a", "b", "c"]);
    report.comment("seed", 41);
    let mut want = Vec::new();
    for i in 0..1000 {
        let row = match i % 4 {
            0 => [f64::from_bits(rng.next_u64()), rng.normal(), 0.1 * i as f64],
            1 => [rng.uniform() * 1e-310, -rng.uniform() * 1e300, -0.0],
            2 => [1.0 / 3.0, f64::MIN_POSITIVE, f64::MAX],
            _ => [rng.normal() * 1e-20, i as f64, f64::EPSILON],
        };
        let row = row.map(|v| if v.is_finite() { v } else { 0.5 });
        want.push(row.to_vec());
        report.push(row.iter().map(|&v| Cell::Real(v)).collect());
    }
    let got = reparse(&report);
    assert_eq!(got.len(), 1000);
    for (g, w) in got.iter().zip(&want) {
        let gb: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
        let wb: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
        assert_eq!(gb, wb);
    }
}

#[test]
fn empty_report_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    write_report(&Report::new(&["x", "y"]), &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "x,y\n");
}

#[test]
fn shortest_round_trip_formatting() {
    assert_eq!(Cell::Real(0.1).render(), "0.1");
    assert_eq!(Cell::Real(1.0).render(), "1.0");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reports_round_trip(rows in prop::collection::vec(prop::collection::vec(finite(), 4), 0..40)) {
        let mut report = Report::new(&["p", "q", "r", "s"]);
        for r in &rows {
            report.push(r.iter().map(|&v| Cell::Real(v)).collect());
        }
        let got = reparse(&report);
        prop_assert_eq!(got.len(), rows.len());
        for (g, w) in got.iter().zip(&rows) {
            for (a, b) in g.iter().zip(w) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit(theta in prop::collection::vec(finite(), 0..300), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let ck = Checkpoint {
            meta: CheckpointMeta {
                model: ModelConfig::mlp("m", [1, 1, 2], &[], 2),
                seed,
                epochs_completed: 3,
                info: serde_json::json!({"note": "x"}),
            },
            momentum: theta.iter().map(|v| -v).collect(),
            theta: ParamVector(theta),
            bn_stats: vec![f64::MIN_POSITIVE / 2.0, -0.0],
        };
        let hash = save_checkpoint(&path, &ck).unwrap();
        let (back, h2) = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&hash, &h2);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.theta.0), bits(&ck.theta.0));
        prop_assert_eq!(bits(&back.momentum), bits(&ck.momentum));
        prop_assert_eq!(bits(&back.bn_stats), bits(&ck.bn_stats));
        prop_assert_eq!(back.meta, ck.meta);
    }

    #[test]
    fn flipping_any_payload_byte_is_detected(pos in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let ck = Checkpoint {
            meta: CheckpointMeta {
                model: ModelConfig::mlp("m", [1, 1, 2], &[], 2),
                seed: 1,
                epochs_completed: 0,
                info: serde_json::Value::Null,
            },
            theta: ParamVector(vec![0.25; 6]),
            momentum: vec![],
            bn_stats: vec![],
        };
        save_checkpoint(&path, &ck).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        prop_assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn idx_round_trips_through_files(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let inputs = Tensor::new(vec![n, 1, 3, 2], (0..n * 6).map(|_| rng.uniform()).collect()).unwrap();
        let labels = (0..n).map(|_| rng.below(4)).collect();
        let ds = Dataset::new(inputs, labels, 4, provenance(seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (im, lb) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        save_idx(&ds, &im, &lb).unwrap();
        let back = load_idx(&im, &lb).unwrap();
        prop_assert_eq!(&back.inputs, &ds.inputs);
        prop_assert_eq!(&back.labels, &ds.labels);
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::derive(seed, stream);
        let mut b = Rng::derive(seed, stream);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(seed);
        let mut d = Rng::new(seed);
        prop_assert_eq!(c.normal_vec(16), d.normal_vec(16));
    }

    #[test]
    fn blobs_are_deterministic_and_in_range(seed in any::<u64>(), sep in 0.1f64..20.0) {
        let spec = BlobSpec::new(3, 4, [1, 3, 3], sep, seed);
        let a = synth_blobs(&spec).unwrap();
        let b = synth_blobs(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.len(), 12);
    }

    #[test]
    fn dot_is_reproducible_and_symmetric(v in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let w: Vec<f64> = v.iter().rev().copied().collect();
        let a = dot(&v, &w).unwrap();
        prop_assert_eq!(a.to_bits(), dot(&v, &w).unwrap().to_bits());
        prop_assert_eq!(a.to_bits(), dot(&w, &v).unwrap().to_bits());
    }

    #[test]
    fn orthonormalization_ignores_basis_order(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = Rng::new(seed);
        let n = 30;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < k {
            let refs: Vec<&[f64]> = basis.iter().map(|b| b.as_slice()).collect();
            if let Ok(b) = orthonormalize_against(&rng.normal_vec(n), &refs) {
                basis.push(b);
            }
        }
        let v = rng.normal_vec(n);
        let fwd: Vec<&[f64]> = basis.iter().map(|b| b.as_slice()).collect();
        let rev: Vec<&[f64]> = basis.iter().rev().map(|b| b.as_slice()).collect();
        let a = orthonormalize_against(&v, &fwd).unwrap();
        let b = orthonormalize_against(&v, &rev).unwrap();
        let s = if dot(&a, &b).unwrap() < 0.0 { -1.0 } else { 1.0 };
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - s * q).abs() <= 1e-10);
        }
        for q in &basis {
            prop_assert!(dot(&a, q).unwrap().abs() <= 1e-10);
        }
    }
}

#[test]
fn datasets_reject_out_of_range_values() {
    let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 1.5]).unwrap();
    assert!(Dataset::new(x, vec![0], 2, provenance(0)).is_err());
    let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
    assert!(Dataset::new(x, vec![2], 2, provenance(0)).is_err());
}
