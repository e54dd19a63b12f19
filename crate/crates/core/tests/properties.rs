use proptest::prelude::*;

use spikeflow::diff::{read_checkpoint, write_checkpoint, Tensor};
use spikeflow::eval::{self, aee};
use spikeflow::intensity::{self, effective_weights, EstimatorTerms, FusionWeights, ReconConfig};
use spikeflow::spike_stream::clip_window;
use spikeflow::{FlowField, Pixel, SpikeStream};

fn stream_strategy() -> impl Strategy<Value = SpikeStream> {
    (1usize..5, 1usize..7, 1usize..60, any::<u64>()).prop_map(|(h, w, n, bits)| {
        let mut state = bits | 1;
        SpikeStream::from_fn(h, w, n, 2.5e-5, |_, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state % 3 == 0
        })
        .unwrap()
    })
}

fn flow_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(-50.0f32..50.0, 2 * h * w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spk_roundtrip(s in stream_strategy()) {
        let bytes = s.to_bytes();
        let back = SpikeStream::decode(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_spk_is_rejected(s in stream_strategy(), cut in 1usize..40) {
        let bytes = s.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(SpikeStream::decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn window_count_matches_loop(s in stream_strategy(), tau in 0usize..80, half in 0usize..30) {
        let tau = tau % s.len();
        let index = s.index();
        for y in 0..s.height() {
            for x in 0..s.width() {
                let lo = tau.saturating_sub(half);
                let hi = (tau + half).min(s.len() - 1);
                let count = (lo..=hi).filter(|&t| s.get(t, y, x)).count();
                let wc = s.count_in_window(Pixel::new(x, y), tau, half).unwrap();
                prop_assert_eq!(wc.count, count);
                prop_assert_eq!(wc.length, hi - lo + 1);
                prop_assert_eq!(index.count_in_window(y * s.width() + x, tau, half), wc);
            }
        }
        prop_assert_eq!(clip_window(tau, half, s.len()), tau.saturating_sub(half)..=(tau + half).min(s.len() - 1));
    }

    #[test]
    fn estimators_ignore_frames_outside_their_support(s in stream_strategy(), tau in 0usize..80, extra in 1usize..20) {
        let tau = tau % s.len();
        let (h, w, n) = (s.height(), s.width(), s.len());
        let longer = SpikeStream::from_fn(h, w, n + extra, s.period(), |t, y, x| t < n && s.get(t, y, x)).unwrap();
        let half = 3;
        if tau + half < n {
            let a = intensity::window_estimate::<f64>(&s.index(), tau, half);
            let b = intensity::window_estimate::<f64>(&longer.index(), tau, half);
            prop_assert_eq!(a, b);
        }
        // appending silent frames never creates a bracketing spike
        for k in 1..=2 {
            let a = intensity::interval_estimate::<f64>(&s.index(), tau, k).unwrap();
            let b = intensity::interval_estimate::<f64>(&longer.index(), tau, k).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn fusion_is_convex(s in stream_strategy(), tau in 0usize..80, raw in prop::collection::vec(0.01f64..1.0, 4)) {
        let tau = tau % s.len();
        let cfg = ReconConfig { short_half: 2, long_half: 5, max_order: 2 };
        let terms = EstimatorTerms::<f64>::compute(&s.index(), tau, &cfg).unwrap();
        let total: f64 = raw.iter().sum();
        let w = [raw[0] / total, raw[1] / total, raw[2] / total, raw[3] / total];
        let weights = FusionWeights::uniform(s.height(), s.width(), w).unwrap();
        let fused = intensity::fuse(&terms, &weights).unwrap();
        for p in 0..s.height() * s.width() {
            let valid: Vec<f64> = (0..4).filter(|&k| terms.valid[k][p]).map(|k| terms.terms[k].values()[p]).collect();
            let lo = valid.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = fused.values()[p];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            let eff = effective_weights(w, std::array::from_fn(|k| terms.valid[k][p]));
            prop_assert!((eff.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flo_roundtrip_is_exact((h, w, data) in flow_strategy()) {
        let flow = FlowField::from_planes(h, w, data).unwrap();
        let mut buf = Vec::new();
        eval::write_flo(&flow, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 12 + 8 * h * w);
        let back = eval::read_flo(buf.as_slice()).unwrap();
        prop_assert_eq!(back, flow);
    }

    #[test]
    fn aee_scales_and_permutes((h, w, a) in flow_strategy(), b in prop::collection::vec(-50.0f64..50.0, 50), c in -4.0f64..4.0) {
        let n = h * w;
        let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let fb: Vec<f64> = (0..2 * n).map(|i| b[i % b.len()]).collect();
        let mask = vec![true; n];
        let x = FlowField::from_planes(h, w, fa.clone()).unwrap();
        let y = FlowField::from_planes(h, w, fb.clone()).unwrap();
        let base = aee(&x, &y, &mask).unwrap();
        let xs = x.map(|v| c * v);
        let ys = y.map(|v| c * v);
        prop_assert!((aee(&xs, &ys, &mask).unwrap() - c.abs() * base).abs() <= 1e-9 * (1.0 + base));
        // reverse pixel order in both fields
        let rev = |v: &[f64]| -> Vec<f64> {
            let (u, vv) = v.split_at(n);
            u.iter().rev().chain(vv.iter().rev()).copied().collect()
        };
        let xr = FlowField::from_planes(h, w, rev(&fa)).unwrap();
        let yr = FlowField::from_planes(h, w, rev(&fb)).unwrap();
        prop_assert!((aee(&xr, &yr, &mask).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
    }

    #[test]
    fn checkpoint_roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 1..6), fill in any::<u64>()) {
        let mut state = fill | 1;
        let entries: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let t = Tensor::from_fn(shape, |_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(state >> 2)
                });
                (format!("p{i}.weight"), t)
            })
            .collect();
        let mut buf = Vec::new();
        write_checkpoint(&entries, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for ((na, ta), (nb, tb)) in entries.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }
}
