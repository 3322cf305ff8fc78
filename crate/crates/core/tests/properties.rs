//! Invariants checked over generated inputs.

use std::path::Path;

use flowreg::eval::{
    dice, endpoint_error, jacobian_determinant, make_bump_deformation, make_phantom, BumpDeformSpec, PhantomSpec,
};
use flowreg::flow::{rollout, FlowConfig};
use flowreg::io::{decode_volume, encode_volume, parse_config, VolumeFile};
use flowreg::net::{forward_batch, init_params, Activation, MlpParams, NetConfig};
use flowreg::objective::{ncc, registration_loss, velocity_regularizer, SimMetric};
use flowreg::registration::{
    coarse_to_fine, inr_lddmm, OptimConfig, RegistrationConfig, StageSettings, Termination,
};
use flowreg::volume::{
    resample_field, sample_trilinear, warp_mask_nearest, warp_volume, GridSpec, LabelMask, VectorField3, Volume3,
};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    [2usize..7, 2usize..7, 2usize..7]
}

fn volume_strategy(dims: [usize; 3]) -> impl Strategy<Value = Volume3> {
    let g = GridSpec::with_dims(dims).unwrap();
    proptest::collection::vec(-2.0f64..2.0, g.len()).prop_map(move |v| Volume3::new(g, v).unwrap())
}

fn sized_volume() -> impl Strategy<Value = Volume3> {
    dims_strategy().prop_flat_map(volume_strategy)
}

fn field_strategy(dims: [usize; 3], amp: f64) -> impl Strategy<Value = VectorField3> {
    let g = GridSpec::with_dims(dims).unwrap();
    proptest::collection::vec([-amp..amp, -amp..amp, -amp..amp], g.len())
        .prop_map(move |v| VectorField3::new(g, v).unwrap())
}

fn random_net(h: usize, act: Activation) -> impl Strategy<Value = MlpParams> {
    let cfg = NetConfig {
        hidden_width: h,
        activation: act,
        sine_frequency: 30.0,
        seed: 0,
    };
    proptest::collection::vec(-0.3f64..0.3, cfg.param_count())
        .prop_map(move |v| MlpParams::from_values(cfg, v).unwrap())
}

fn mask_from(vol: &Volume3) -> LabelMask {
    LabelMask::new(*vol.grid(), vol.data().iter().map(|v| (v.abs() * 2.0) as u16).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalize_then_denormalize(dims in dims_strategy(), f in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0]) {
        let g = GridSpec::with_dims(dims).unwrap();
        let idx: [f64; 3] = std::array::from_fn(|a| f[a] * (dims[a] - 1) as f64);
        let back = g.denormalize(g.normalize(idx));
        for a in 0..3 {
            prop_assert!((back[a] - idx[a]).abs() <= 1e-12);
        }
    }

    #[test]
    fn trilinear_hits_nodes(vol in sized_volume()) {
        let g = *vol.grid();
        for idx in 0..g.len() {
            prop_assert_eq!(sample_trilinear(&vol, g.node_unit(idx)), vol.data()[idx]);
        }
    }

    #[test]
    fn trilinear_reproduces_affine(
        dims in dims_strategy(),
        c in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
        p in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
    ) {
        let g = GridSpec::with_dims(dims).unwrap();
        let f = |q: [f64; 3]| c[0] + c[1] * q[0] + c[2] * q[1] + c[3] * q[2];
        let vol = Volume3::from_fn(g, |ijk| f(g.node_unit(g.index(ijk[0], ijk[1], ijk[2]))));
        prop_assert!((sample_trilinear(&vol, p) - f(p)).abs() <= 1e-12);
    }

    #[test]
    fn zero_field_warp_is_identity(vol in sized_volume()) {
        let zero = VectorField3::zeros(*vol.grid());
        let warped = warp_volume(&vol, &zero, vol.grid());
        prop_assert!(warped.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn nearest_warp_only_uses_existing_labels(
        (vol, s) in dims_strategy().prop_flat_map(|d| (volume_strategy(d), field_strategy(d, 0.8))),
    ) {
        let mask = mask_from(&vol);
        let warped = warp_mask_nearest(&mask, &s, mask.grid());
        let labels = mask.labels();
        prop_assert!(warped.labels().iter().all(|l| labels.contains(l)));
    }

    #[test]
    fn resample_to_same_dims_is_identity(s in dims_strategy().prop_flat_map(|d| field_strategy(d, 1.0))) {
        let back = resample_field(&s, s.dims()).unwrap();
        prop_assert_eq!(back.data(), s.data());
    }

    #[test]
    fn batch_forward_matches_single(
        params in random_net(5, Activation::Sine),
        pts in proptest::collection::vec([-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0], 1..20),
        t in 0.0f64..1.0,
    ) {
        let batch = forward_batch(&params, &pts, t);
        for (p, b) in pts.iter().zip(&batch) {
            prop_assert_eq!(params.forward(*p, t), *b);
        }
    }

    #[test]
    fn rollout_displacement_is_final_minus_start(
        params in random_net(4, Activation::Tanh),
        dims in dims_strategy(),
        n in 1usize..5,
    ) {
        let flow = FlowConfig::new(dims, n).unwrap();
        let r = rollout(&params, &flow).unwrap();
        let g = flow.grid();
        for (idx, (s, q)) in r.displacement.data().iter().zip(&r.final_positions).enumerate() {
            let x = g.node_unit(idx);
            for a in 0..3 {
                prop_assert!((s[a] - (q[a] - x[a])).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(r.snapshots.len(), n);
        let whole = r.partial_displacement(n).unwrap();
        prop_assert_eq!(whole.data(), r.displacement.data());
    }

    #[test]
    fn fresh_network_has_no_flow(seed in any::<u64>(), h in 1usize..12, tanh in any::<bool>()) {
        let params = init_params(&NetConfig {
            hidden_width: h,
            activation: if tanh { Activation::Tanh } else { Activation::Sine },
            sine_frequency: 30.0,
            seed,
        }).unwrap();
        let r = rollout(&params, &FlowConfig::new([4, 3, 5], 3).unwrap()).unwrap();
        prop_assert!(r.displacement.data().iter().all(|s| *s == [0.0; 3]));
    }

    #[test]
    fn loss_total_is_the_weighted_sum(
        params in random_net(4, Activation::Sine),
        (m, f) in volume_strategy([5, 5, 4]).prop_flat_map(|m| (Just(m), volume_strategy([5, 5, 4]))),
        lambda in 0.0f64..2.0,
        gamma in 0.0f64..2.0,
        mse in any::<bool>(),
    ) {
        let metric = if mse { SimMetric::Mse } else { SimMetric::Ncc };
        let flow = FlowConfig::new([3, 3, 3], 2).unwrap();
        let l = registration_loss(&params, &m, &f, &flow, metric, lambda, gamma).unwrap();
        prop_assert!((l.total - (l.similarity + lambda * l.regularizer + l.distill)).abs() <= 1e-12);
        prop_assert!(l.regularizer >= 0.0);
        prop_assert_eq!(l.distill, 0.0);
    }

    #[test]
    fn ncc_ignores_affine_intensity_changes(
        (a, b) in dims_strategy().prop_flat_map(|d| (volume_strategy(d), volume_strategy(d))),
        scale in 0.1f64..5.0,
        shift in -3.0f64..3.0,
    ) {
        let mapped = Volume3::new(*a.grid(), a.data().iter().map(|v| scale * v + shift).collect()).unwrap();
        prop_assert!((ncc(&a, &b).unwrap() - ncc(&mapped, &b).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn regularizer_is_nonnegative(params in random_net(3, Activation::Tanh), gamma in 0.0f64..3.0) {
        let r = rollout(&params, &FlowConfig::new([3, 4, 3], 2).unwrap()).unwrap();
        prop_assert!(velocity_regularizer(&r.snapshots, gamma).unwrap() >= 0.0);
    }

    #[test]
    fn dice_is_symmetric(
        (a, b) in dims_strategy().prop_flat_map(|d| (volume_strategy(d), volume_strategy(d))),
        label in 0u16..4,
    ) {
        let (ma, mb) = (mask_from(&a), mask_from(&b));
        let ab = dice(&ma, &mb, label).unwrap();
        prop_assert_eq!(ab, dice(&mb, &ma, label).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&ma, &ma, label).unwrap(), 1.0);
    }

    #[test]
    fn endpoint_error_of_a_field_with_itself_is_zero(s in [3usize..6, 3usize..6, 3usize..6].prop_flat_map(|d| field_strategy(d, 0.5))) {
        prop_assert_eq!(endpoint_error(&s, &s).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn volume_files_round_trip(vol in sized_volume()) {
        // the payload is f32, so start from values it can hold
        let vol = Volume3::new(*vol.grid(), vol.data().iter().map(|v| *v as f32 as f64).collect()).unwrap();
        let mask = mask_from(&vol);
        for file in [VolumeFile::from(vol.clone()), VolumeFile::from(mask)] {
            let bytes = encode_volume(&file);
            prop_assert_eq!(decode_volume(&bytes, Path::new("mem")).unwrap(), file);
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z]{3,10}\\.[a-z]{3,10}") {
        let known = ["optimizer.", "coarse.", "distill.", "fine.", "net."];
        prop_assume!(!known.iter().any(|p| key.starts_with(p)));
        let text = format!("{} = 1", key);
        prop_assert!(parse_config(&text).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_field_has_unit_jacobian(dims in [3usize..7, 3usize..7, 3usize..7]) {
        let det = jacobian_determinant(&VectorField3::zeros(GridSpec::with_dims(dims).unwrap())).unwrap();
        prop_assert!(det.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn admissible_bumps_do_not_fold(
        center in [-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5],
        amplitude in 0.5f64..4.0,
        sigma in 0.3f64..0.6,
        axis in 0usize..3,
    ) {
        let dims = [20, 18, 16];
        let mut direction = [0.0; 3];
        direction[axis] = 1.0;
        let spec = BumpDeformSpec { center, amplitude_voxels: amplitude, direction, sigma };
        prop_assume!(spec.fold_bound(dims) < 1.0);
        let s = make_bump_deformation(&spec, dims).unwrap();
        let det = jacobian_determinant(&s).unwrap();
        prop_assert!(det.data().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn a_short_stage_makes_progress(seed in 0u64..1000) {
        let (image, _) = make_phantom(&PhantomSpec { dims: [16, 16, 16], n_blobs: 1, seed, ..PhantomSpec::default() }).unwrap();
        let shifted = warp_volume(&image, &VectorField3::from_fn(*image.grid(), |_| [0.05, 0.0, 0.0]), image.grid());
        let settings = StageSettings {
            field_dims: [4, 4, 4],
            n_steps: 2,
            metric: SimMetric::Ncc,
            lambda: 0.1,
            gamma: 1.0,
            optim: OptimConfig { learning_rate: 1e-3, max_iters: 12, ..OptimConfig::default() },
        };
        let params0 = init_params(&NetConfig { hidden_width: 8, seed, ..NetConfig::default() }).unwrap();
        let mut seen = Vec::new();
        let r = inr_lddmm(&shifted, &image, &params0, &settings, &mut |i, l| seen.push((i, l.total))).unwrap();
        prop_assert_eq!(r.iterations_run, r.loss_history.len());
        prop_assert_eq!(seen.len(), r.loss_history.len());
        prop_assert!(r.loss_history.iter().all(|l| l.total.is_finite()));
        let best = r.loss_history.iter().map(|l| l.total).fold(f64::INFINITY, f64::min);
        prop_assert!(best < r.loss_history[0].total);
    }
}

#[test]
fn zero_iteration_stage_returns_the_start() {
    let (image, _) = make_phantom(&PhantomSpec {
        dims: [16, 16, 16],
        n_blobs: 1,
        ..PhantomSpec::default()
    })
    .unwrap();
    let params0 = init_params(&NetConfig {
        hidden_width: 4,
        ..NetConfig::default()
    })
    .unwrap();
    let settings = StageSettings {
        field_dims: [4, 4, 4],
        n_steps: 2,
        metric: SimMetric::Mse,
        lambda: 0.1,
        gamma: 1.0,
        optim: OptimConfig::with_iters(0),
    };
    let r = inr_lddmm(&image, &image, &params0, &settings, &mut |_, _| panic!("no iterations expected")).unwrap();
    assert_eq!(r.iterations_run, 0);
    assert!(r.loss_history.is_empty());
    assert_eq!(r.termination, Termination::MaxIters);
    assert_eq!(r.params, params0);
    assert!(r.displacement.data().iter().all(|s| *s == [0.0; 3]));
}

#[test]
fn stages_do_not_share_state() {
    // a second run with the same inputs reproduces the first exactly, and the
    // distillation stage starts from a fresh network, not the coarse one
    let (image, _) = make_phantom(&PhantomSpec {
        dims: [12, 12, 12],
        n_blobs: 1,
        ..PhantomSpec::default()
    })
    .unwrap();
    let moved = warp_volume(&image, &VectorField3::from_fn(*image.grid(), |_| [0.04, -0.02, 0.0]), image.grid());
    let cfg = RegistrationConfig {
        coarse_dims: [4, 4, 4],
        fine_dims: [6, 6, 6],
        n_steps: 2,
        net: NetConfig {
            hidden_width: 8,
            ..NetConfig::default()
        },
        coarse_optim: OptimConfig {
            learning_rate: 1e-3,
            ..OptimConfig::with_iters(8)
        },
        distill_optim: OptimConfig {
            learning_rate: 1e-3,
            ..OptimConfig::with_iters(8)
        },
        fine_optim: OptimConfig {
            learning_rate: 1e-3,
            ..OptimConfig::with_iters(8)
        },
        ..RegistrationConfig::default()
    };
    let a = coarse_to_fine(&cfg, &moved, &image, &mut |_, _, _| {}).unwrap();
    let b = coarse_to_fine(&cfg, &moved, &image, &mut |_, _, _| {}).unwrap();
    assert_eq!(a.final_displacement().unwrap().data(), b.final_displacement().unwrap().data());
    let distill = a.distill.as_ref().unwrap();
    let first = distill.initial_loss().unwrap();
    let upsampled = a.upsampled.as_ref().unwrap();
    let target_energy = upsampled.data().iter().map(|s| s.iter().map(|c| c * c).sum::<f64>()).sum::<f64>()
        / upsampled.data().len() as f64;
    // a zero-flow start makes the residual the energy of the target itself
    assert!((first.distill - target_energy).abs() <= 1e-12 * target_energy.max(1.0));
    assert_ne!(a.coarse.params, distill.params);
}
