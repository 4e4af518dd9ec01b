use ctxvad::cae::{CaeConfig, MotionCae};
use ctxvad::datagen::{FlowMap, ObjectCube, Split, FLOW_PIXELS, FRAME_PIXELS, INPUT_FRAMES};
use ctxvad::dataset::{generate_split, DataConfig};
use ctxvad::gradcheck::{check_cae, check_vit};
use ctxvad::objectives::{pred_loss, pred_loss_target_grad};
use ctxvad::optim::TrainConfig;
use ctxvad::training::{train_appearance, train_motion};
use ctxvad::vit::{sample_mask, ContextVit, MaskPattern, PredictionBundle, Streams, VitConfig};

fn sample_split() -> (Vec<ObjectCube>, Vec<FlowMap>) {
    let cfg = DataConfig { train_videos: 1, test_videos: 1, ..DataConfig::default() };
    let g = generate_split(&cfg, Split::Test, 3).unwrap();
    (g.cubes, g.flows)
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn vit_gradients_match_finite_differences() {
    let (cubes, _) = sample_split();
    let batch: Vec<Vec<f64>> = cubes.iter().step_by(7).take(2).map(|c| as_f64(&c.frames)).collect();
    for (streams, seed) in [(Streams::ALL, 1), (Streams::NONE, 2), (Streams::MASKED, 3)] {
        let cfg = VitConfig { streams, ..VitConfig::default() };
        let mut model = ContextVit::<f32>::new(cfg.clone(), seed).unwrap().cast::<f64>();
        let masks: Vec<MaskPattern> = if streams.is_plain() {
            vec![MaskPattern::unmasked(); 2]
        } else {
            vec![sample_mask(cfg.mask_ratio, 4).unwrap(), sample_mask(cfg.mask_ratio, 5).unwrap()]
        };
        let report = check_vit(&mut model, &batch, &masks, 24, 1e-3, seed).unwrap();
        assert_eq!(report.samples.len(), 24);
        for s in &report.samples {
            assert!(s.rel_err < 1e-3, "{}: {s:?}", streams.label());
        }
    }
}

#[test]
fn cae_gradients_match_finite_differences() {
    let (_, flows) = sample_split();
    let batch: Vec<f64> = flows.iter().step_by(5).take(2).flat_map(|f| as_f64(&f.values)).collect();
    let mut model = MotionCae::<f32>::new(CaeConfig::default(), 9).unwrap().cast::<f64>();
    let report = check_cae(&mut model, &batch, 24, 1e-3, 9).unwrap();
    for s in &report.samples {
        assert!(s.rel_err < 1e-3, "{s:?}");
    }
}

fn perturb_masked(cube: &ObjectCube, mask: &MaskPattern) -> ObjectCube {
    let mut frames = cube.frames.clone();
    for &m in &mask.masked {
        for (k, v) in frames[m * FRAME_PIXELS..(m + 1) * FRAME_PIXELS].iter_mut().enumerate() {
            *v = ((k * 31 + m * 7) % 101) as f32 / 101.0;
        }
    }
    ObjectCube::new(frames, cube.video_id.clone(), cube.frame_index, cube.track_id.clone(), cube.label).unwrap()
}

#[test]
fn masked_inputs_cannot_reach_any_output() {
    let (cubes, _) = sample_split();
    let model = ContextVit::<f32>::new(VitConfig::default(), 11).unwrap();
    for (i, cube) in cubes.iter().step_by(9).take(4).enumerate() {
        let mask = sample_mask(0.75, i as u64).unwrap();
        let other = perturb_masked(cube, &mask);
        assert_ne!(other.frames, cube.frames);
        let enc = |c: &ObjectCube| model.encode_visible(&model.embed_frames(c.inputs()).unwrap(), &mask).unwrap();
        let (a, b) = (enc(cube), enc(&other));
        assert_eq!(a.encoded, b.encoded);
        assert_eq!(a.assembled, b.assembled);
        assert_eq!(model.predict_partial(&a.encoded).unwrap(), model.predict_partial(&b.encoded).unwrap());
        let ba = model.forward(cube, &mask).unwrap();
        let bb = model.forward(&other, &mask).unwrap();
        assert_eq!(ba.whole_future, bb.whole_future);
        assert_eq!(ba.partial_future, bb.partial_future);
        assert_eq!(ba.masked_recons, bb.masked_recons);
    }
}

#[test]
fn masked_term_ignores_visible_ground_truth() {
    let (cubes, _) = sample_split();
    let model = ContextVit::<f32>::new(VitConfig { streams: Streams::MASKED, mask_ratio: 0.5, ..VitConfig::default() }, 12).unwrap();
    let cube = &cubes[3];
    let mask = MaskPattern::from_masked(&[0, 2]).unwrap();
    let bundle: PredictionBundle = model.forward(cube, &mask).unwrap();
    assert!(bundle.whole_future.is_none() && bundle.partial_future.is_none());
    let grad = pred_loss_target_grad(&bundle, cube).unwrap();
    for f in 0..=INPUT_FRAMES {
        let block = &grad[f * FRAME_PIXELS..(f + 1) * FRAME_PIXELS];
        if mask.is_masked(f) {
            assert!(block.iter().any(|&g| g != 0.0));
        } else {
            assert!(block.iter().all(|&g| g == 0.0), "frame {f}");
        }
    }
    // probing a visible frame leaves the masked term bit-identical
    let base = pred_loss(&bundle, cube).unwrap().l_masked;
    let mut frames = cube.frames.clone();
    frames[FRAME_PIXELS + 5] = 1.0 - frames[FRAME_PIXELS + 5];
    let probed = ObjectCube::new(frames, "v", 4, "t", 0).unwrap();
    assert_eq!(pred_loss(&bundle, &probed).unwrap().l_masked, base);
}

fn max_abs_diff(a: &PredictionBundle, b: &PredictionBundle) -> f32 {
    assert_eq!(a.mask, b.mask);
    let mut pairs: Vec<(&Vec<f32>, &Vec<f32>)> = a.masked_recons.values().zip(b.masked_recons.values()).collect();
    pairs.extend(a.whole_future.iter().zip(&b.whole_future));
    pairs.extend(a.partial_future.iter().zip(&b.partial_future));
    pairs.iter().flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs())).fold(0.0, f32::max)
}

#[test]
fn batched_forward_matches_single_forwards() {
    let (cubes, _) = sample_split();
    let model = ContextVit::<f32>::new(VitConfig::default(), 13).unwrap();
    let picked: Vec<&ObjectCube> = cubes.iter().step_by(11).take(3).collect();
    let masks: Vec<MaskPattern> = (0..3).map(|i| sample_mask(0.75, 40 + i).unwrap()).collect();
    let inputs: Vec<f32> = picked.iter().flat_map(|c| c.inputs().iter().copied()).collect();
    let out = model.forward_batch(&inputs, &masks).unwrap();
    for (b, (cube, mask)) in model.bundles(&out, &masks).iter().zip(picked.iter().zip(&masks)) {
        let single = model.forward(cube, mask).unwrap();
        assert!(max_abs_diff(b, &single) < 1e-5);
    }
    assert_eq!(model.forward(picked[0], &masks[0]).unwrap(), model.forward(picked[0], &masks[0]).unwrap());
}

#[test]
fn disabled_streams_drop_their_parameters() {
    let count = |s| ContextVit::<f32>::new(VitConfig { streams: s, ..VitConfig::default() }, 0).unwrap();
    let all = count(Streams::ALL);
    let mw = count(Streams::MASKED_WHOLE);
    let m = count(Streams::MASKED);
    let none = count(Streams::NONE);
    assert!(all.param_count() > mw.param_count());
    assert!(mw.param_count() > m.param_count());
    assert_eq!(all.param_count() - mw.param_count(), all.param_count_of("dec_partial.") + all.param_count_of("partial_proj.") + all.param_count_of("partial_head."));
    assert_eq!(m.param_count_of("whole_head."), 0);
    assert_eq!(none.param_count_of("mask_token"), 0);
    assert_eq!(none.param_count_of("partial_head."), 0);
    // deep encoder, shallow decoders
    assert!(all.param_count_of("encoder.") > all.param_count_of("dec_whole."));
    assert!(all.param_count_of("encoder.") > all.param_count_of("dec_partial."));
}

#[test]
fn one_cube_is_memorized() {
    let (cubes, _) = sample_split();
    let one = vec![cubes[5].clone()];
    let cfg = TrainConfig { batch_size: 1, epochs: 300, t0_epochs: 300.0, ..TrainConfig::default() };
    let (trained, log) = train_appearance(&one, VitConfig::default(), &cfg, &mut |_| {}).unwrap();
    assert_eq!(log.steps.len(), 300);
    let fresh = ContextVit::<f32>::new(VitConfig::default(), cfg.seed).unwrap();
    for k in 0..4 {
        let mask = [sample_mask(0.75, k).unwrap()];
        let cube = [one[0].frames.as_slice()];
        let before = fresh.losses(&cube, &mask).unwrap()[0].l_pred;
        let after = trained.losses(&cube, &mask).unwrap()[0].l_pred;
        assert!(after < 0.1 * before, "{before} -> {after}");
    }
}

#[test]
fn zero_flow_is_reconstructed() {
    let flows: Vec<FlowMap> = (0..4).map(|i| FlowMap::new(vec![0.0; FLOW_PIXELS], "z", i + 1, "t0").unwrap()).collect();
    let cfg = TrainConfig { batch_size: 4, epochs: 200, ..TrainConfig::default() };
    let (model, log) = train_motion(&flows, CaeConfig::default(), &cfg, &mut |_| {}).unwrap();
    assert!(log.steps.len() <= 200);
    let recon = model.cae_forward(&flows[0]).unwrap();
    assert!(ctxvad::objectives::flow_loss(&recon, &flows[0]).unwrap() < 1e-3);
}

#[test]
fn training_lowers_the_epoch_loss() {
    let (cubes, flows) = sample_split();
    let normal: Vec<ObjectCube> = cubes.into_iter().filter(|c| c.label == 0).take(48).collect();
    let cfg = TrainConfig { batch_size: 8, epochs: 3, lr: 5e-4, t0_epochs: 3.0, ..TrainConfig::default() };
    let (_, log) = train_appearance(&normal, VitConfig::default(), &cfg, &mut |_| {}).unwrap();
    assert!(log.last_loss().unwrap() < log.first_loss().unwrap());
    let (_, mlog) = train_motion(&flows[..48], CaeConfig::default(), &cfg, &mut |_| {}).unwrap();
    assert_eq!(mlog.epochs.len(), 3);
    assert!(mlog.last_loss().unwrap() < mlog.first_loss().unwrap());
}
