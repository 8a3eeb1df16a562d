use pansharp::fusion::{fuse, fuse_naive, FusionKind, FusionMethod};
use pansharp::metrics::{evaluate, q4, sam, EvalConfig, EvalInputs, QConfig};
use pansharp::models::{
    decode_weights, encode_weights, pansharpen_nn, tile_starts, GeneratorBlueprint, GeneratorVariant, InferenceConfig,
    WeightsFile,
};
use pansharp::protocol::{synth_sample, wald_degrade};
use pansharp::raster::{decode_msrf, encode_msrf, MultiBandImage, ResampleFilter, SampleType};
use proptest::prelude::*;

fn image(w: usize, h: usize, b: usize) -> impl Strategy<Value = MultiBandImage> {
    prop::collection::vec(0.01f64..1.0, w * h * b).prop_map(move |d| MultiBandImage::new(w, h, b, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn msrf_f32_round_trip(img in image(5, 3, 2)) {
        let img = img.map(|v| v as f32 as f64);
        let bytes = encode_msrf(&img);
        let back = decode_msrf(&bytes).unwrap();
        prop_assert_eq!(back.data(), img.data());
        prop_assert_eq!(encode_msrf(&back), bytes);
    }

    #[test]
    fn q4_and_sam_bounds(a in image(8, 8, 4), b in image(8, 8, 4)) {
        let q = q4(&a, &b, QConfig::GLOBAL).unwrap();
        prop_assert!(q.abs() <= 1.0 + 1e-12);
        let s = sam(&a, &b).unwrap().degrees;
        prop_assert!((0.0..=90.0).contains(&s));
    }

    #[test]
    fn reports_compose_qnr(f in image(16, 16, 4), ms in image(4, 4, 4), pan in image(16, 16, 1)) {
        let inputs = EvalInputs { fused: &f, reference: None, ms: Some(&ms), pan: Some(&pan) };
        let r = evaluate("p", inputs, 4, &EvalConfig::default());
        prop_assert!(r.sam.is_none() && r.ergas.is_none());
        if let (Some(dl), Some(ds), Some(q)) = (r.d_lambda, r.d_s, r.qnr) {
            prop_assert_eq!(q, (1.0 - dl) * (1.0 - ds));
        }
    }

    #[test]
    fn tiles_cover_every_edge(n in 1usize..2000, tile_q in 2usize..80, overlap_q in 1usize..20) {
        let (tile, overlap) = (tile_q * 4, (overlap_q * 4).min(tile_q * 4 - 4));
        let starts = tile_starts(n, tile, overlap);
        prop_assert_eq!(starts[0], 0);
        prop_assert!(starts.last().unwrap() + tile >= n);
        for w in starts.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] <= w[0] + tile - overlap);
        }
    }
}

#[test]
fn wald_pipeline_runs_every_method() {
    let s = synth_sample(32, 4, 4, 21).unwrap();
    let low = wald_degrade(&s.ms, &s.pan, 4, ResampleFilter::wald(4)).unwrap();
    assert_eq!((low.ms.dims(), low.pan.dims()), ((2, 2, 4), (8, 8, 1)));
    assert_eq!(low.reference, s.ms);

    let up = fuse_naive(&s.ms, 4).unwrap();
    for kind in FusionKind::ALL {
        let out = fuse(FusionMethod::new(kind), &up, &s.pan).unwrap().image;
        assert_eq!(out.dims(), s.reference.dims());
        assert!(out.data().iter().all(|v| v.is_finite()), "{kind}");
        let inputs = EvalInputs {
            fused: &out,
            reference: Some(&s.reference),
            ms: Some(&s.ms),
            pan: Some(&s.pan),
        };
        let r = evaluate(kind.name(), inputs, 4, &EvalConfig::default());
        assert!(r.values().iter().all(Option::is_some), "{kind}: {:?}", r.notes);
    }
}

#[test]
fn weights_survive_a_round_trip_into_inference() {
    let s = synth_sample(32, 4, 4, 5).unwrap();
    for v in GeneratorVariant::ALL {
        let g = GeneratorBlueprint::new(v, 4).with_width(3).build(12);
        let bytes = encode_weights(&WeightsFile::from_generator(v, 4, &g));
        let back = decode_weights(&bytes).unwrap().to_generator(v).unwrap();
        let cfg = InferenceConfig::default();
        let a = pansharpen_nn(&s.ms, &s.pan, &g, v, &cfg).unwrap();
        let b = pansharpen_nn(&s.ms, &s.pan, &back, v, &cfg).unwrap();
        assert_eq!(a.data(), b.data(), "{v}");
    }
}

#[test]
fn normalization_round_trips_integer_encodings() {
    let s = synth_sample(16, 3, 4, 2).unwrap();
    let img = s.reference.denormalized(65535.0, SampleType::U16).map(f64::round);
    let img = img.with_value_range(0.0, 65535.0).with_dtype(SampleType::U16);
    let back = decode_msrf(&encode_msrf(&img)).unwrap();
    let again = back.normalized().denormalized(65535.0, SampleType::U16);
    assert_eq!(encode_msrf(&again), encode_msrf(&img));
}
