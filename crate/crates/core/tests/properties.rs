use hydrodeep::data::{
    distance_weights, load_watershed, normalize_fit, window_samples, write_watershed, DateRange, PreparedWatershed, WINDOW,
};
use hydrodeep::model::{build_model, ArchSpec, ConvSpec, FreezeMask, ParamGroup, Variant};
use hydrodeep::nn::{Conv1d, Lstm};
use hydrodeep::synth::{generate_watershed, SynthSpec};
use hydrodeep::train::{mse_loss, train, TrainConfig};
use hydrodeep::transfer::{make_transfer_plan, transfer_model, TransferMode};
use hydrodeep::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        conv: vec![ConvSpec { out_channels: 3, kernel: 3 }],
        lstm: vec![4],
        target_branch_units: 2,
        head: vec![4, 1],
        variant: Variant::HydroDeep,
    }
}

fn prepared(grids: usize, days: usize, seed: u64) -> PreparedWatershed {
    PreparedWatershed::new(generate_watershed(&SynthSpec::new("p", grids, days, seed)).unwrap(), 0.7).unwrap()
}

proptest! {
    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, c_out, k) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let (n, t) = (rng.random_range(1..=4), rng.random_range(k..=8));
        let conv = Conv1d::glorot(c_in, c_out, k, &mut rng);
        let x = random(&[c_in, n, t], &mut rng, 1.0);
        let y = random(&[c_in, n, t], &mut rng, 1.0);
        let zero = conv.forward(&Tensor::filled(&[c_in, n, t], 0.0)).unwrap();
        let f = |v: &Tensor| {
            let out = conv.forward(v).unwrap();
            out.values().iter().zip(zero.values()).map(|(o, z)| o - z).collect::<Vec<_>>()
        };
        let mix = Tensor::new(
            x.dims().to_vec(),
            x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        let (fx, fy, fm) = (f(&x), f(&y), f(&mix));
        for i in 0..fm.len() {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_hidden_states_stay_in_open_unit_interval(seed in any::<u64>(), scale in 0.1..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (n, t) = (rng.random_range(1..=3), rng.random_range(1..=8));
        let lstm = Lstm::glorot(c, h, 1.0, &mut rng);
        let out = lstm.forward(&random(&[c, n, t], &mut rng, scale), None, None).unwrap();
        prop_assert!(out.hidden.values().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn layer_passes_are_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv1d::glorot(3, 4, 2, &mut rng);
        let x = random(&[3, 2, 6], &mut rng, 1.0);
        let (y1, cache1) = conv.forward_cached(&x).unwrap();
        let (y2, cache2) = conv.forward_cached(&x).unwrap();
        prop_assert_eq!(&y1, &y2);
        let up = random(y1.dims(), &mut rng, 1.0);
        let g1 = conv.backward(&cache1, &up).unwrap();
        let g2 = conv.backward(&cache2, &up).unwrap();
        prop_assert_eq!(format!("{g1:?}"), format!("{g2:?}"));
        let lstm = Lstm::glorot(3, 5, 1.0, &mut rng);
        let a = lstm.forward(&x, None, None).unwrap();
        let b = lstm.forward(&x, None, None).unwrap();
        prop_assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn distance_weights_sum_to_count_and_order_inversely(d in prop::collection::vec(0.0..50.0f64, 1..60)) {
        let w = distance_weights(&d, 1e-6).unwrap();
        let w = w.as_slice();
        let l = d.len() as f64;
        prop_assert!((w.iter().sum::<f64>() - l).abs() <= 1e-9 * l.max(1.0));
        prop_assert!(w.iter().all(|&x| x > 0.0));
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
        for pair in order.windows(2) {
            prop_assert!(w[pair[0]] >= w[pair[1]]);
        }
    }

    #[test]
    fn distance_weights_are_scale_invariant_without_guard(d in prop::collection::vec(0.1..50.0f64, 1..40), c in 0.01..100.0f64) {
        let w = distance_weights(&d, 0.0).unwrap();
        let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
        let v = distance_weights(&scaled, 0.0).unwrap();
        for (a, b) in w.as_slice().iter().zip(v.as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn window_count_law(start in 0usize..40, len in 0usize..100) {
        let ds = generate_watershed(&SynthSpec::new("law", 2, 160, 3)).unwrap();
        let w = distance_weights(&ds.distances(), 1e-6).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.full_range()).unwrap();
        let range = ds.range_of(start..start + len);
        let n = window_samples(&ds, &w, &stats, &range).unwrap().len();
        prop_assert_eq!(n, len.saturating_sub(WINDOW));
    }
}

#[test]
fn load_then_window_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_watershed(&SynthSpec::new("rt", 3, 90, 2)).unwrap();
    write_watershed(&ds, tmp.path().join("rt")).unwrap();
    let load = || {
        let ds = load_watershed(tmp.path().join("rt")).unwrap();
        let w = distance_weights(&ds.distances(), 1e-6).unwrap();
        let stats = normalize_fit(&ds, &w, &ds.full_range()).unwrap();
        window_samples(&ds, &w, &stats, &ds.full_range()).unwrap()
    };
    let a = load();
    assert_eq!(a.len(), 90 - WINDOW);
    assert_eq!(a, load());
    let range = DateRange::new(ds.dates()[0], ds.dates()[0]);
    assert_eq!(range.len_days(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn one_model_serves_any_grid_count(grids in 1usize..40, seed in any::<u64>()) {
        let model = build_model(&tiny_arch(), 3).unwrap();
        let data = prepared(grids, 40, seed);
        let preds: Vec<f64> = data.train.iter().map(|s| model.forward(s).unwrap()).collect();
        prop_assert!(preds.iter().all(|p| p.is_finite()));
        let again: Vec<f64> = data.train.iter().map(|s| model.forward(s).unwrap()).collect();
        prop_assert_eq!(preds, again);
    }

    #[test]
    fn groups_partition_every_parameter(conv in 1usize..3, lstm in 1usize..3, head in 1usize..3, seed in any::<u64>()) {
        let arch = ArchSpec {
            conv: vec![ConvSpec { out_channels: 3, kernel: 2 }; conv],
            lstm: vec![4; lstm],
            target_branch_units: 2,
            head: [vec![3; head - 1], vec![1]].concat(),
            variant: Variant::HydroDeep,
        };
        let model = build_model(&arch, seed).unwrap();
        let names = model.param_names();
        prop_assert_eq!(names.len(), model.tensors().len());
        for name in &names {
            let hits = ParamGroup::ALL.iter().filter(|g| name.starts_with(&format!("{}.", g.prefix()))).count();
            prop_assert_eq!(hits, 1, "{}", name);
        }
    }

    #[test]
    fn frozen_tensors_survive_training_bit_for_bit(mask_bits in 0u8..16, iterations in 0usize..3, seed in any::<u64>()) {
        let frozen: Vec<ParamGroup> = ParamGroup::ALL.iter().enumerate().filter(|(i, _)| mask_bits & (1 << i) != 0).map(|(_, g)| *g).collect();
        let data = prepared(2, 60, 1);
        let mut model = build_model(&tiny_arch(), 5).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { iterations, batch_size: 8, seed, freeze: FreezeMask::of(&frozen), ..TrainConfig::default() };
        let report = train(&mut model, &data.train, &cfg).unwrap();
        prop_assert_eq!(report.losses.len(), iterations);
        let groups = model.param_groups();
        for ((after, start), group) in model.tensors().iter().zip(before.tensors()).zip(groups) {
            if frozen.contains(&group) || iterations == 0 {
                prop_assert_eq!(after.values(), start.values());
            } else {
                prop_assert_ne!(after.values(), start.values());
            }
        }
    }
}

#[test]
fn plan_mapping_is_total_and_fixed() {
    let mut seen = Vec::new();
    for mode in TransferMode::ALL {
        let plan = make_transfer_plan(mode);
        assert_eq!(plan, make_transfer_plan(mode));
        assert_eq!(plan.mode, mode);
        seen.push(plan.frozen.to_string());
    }
    assert_eq!(seen, ["conv,lstm,target_branch,head", "", "conv,target_branch", "lstm"]);
}

#[test]
fn full_finetune_reaches_at_most_the_zero_shot_loss() {
    let source_data = prepared(3, 300, 4);
    let mut source = build_model(&tiny_arch(), 2).unwrap();
    train(&mut source, &source_data.train, &TrainConfig { iterations: 3, seed: 2, ..TrainConfig::default() }).unwrap();
    for seed in 0..4 {
        let target = prepared(5, 120, 40 + seed);
        let labels: Vec<f64> = target.train.iter().map(|s| s.label).collect();
        let zero_pred: Vec<f64> = target.train.iter().map(|s| source.forward(s).unwrap()).collect();
        let zero_loss = mse_loss(&zero_pred, &labels).unwrap();
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (_, report) = transfer_model(&source, &make_transfer_plan(TransferMode::FullFinetune), &target.train, &cfg).unwrap();
        let best = report.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best <= zero_loss, "seed {seed}: {best} > {zero_loss}");
    }
}
