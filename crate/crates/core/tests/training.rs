use icmf_core::checkpoint::{from_bytes, to_bytes, TrainState};
use icmf_core::clicks::InteractionState;
use icmf_core::eval::iou;
use icmf_core::imageops::{flip_mask, rot90_mask};
use icmf_core::mask::MASK_THRESHOLD;
use icmf_core::model::{Model, Segmenter};
use icmf_core::oracle::first_click;
use icmf_core::params::Ctx;
use icmf_core::training::{augment, nfl_loss, synth_train_set, AdamState, Augmentation, TrainConfig, TrainSample, Trainer};
use icmf_core::{BitMask, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig { image_side: 32, ..ModelConfig::tiny() }
}

fn trainer(seed: u64) -> Trainer {
    let cfg = TrainConfig { batch_size: 2, seed, ..TrainConfig::desk() };
    Trainer::new(Model::init(small_cfg(), 1).unwrap(), cfg, synth_train_set(4, 32, 2)).unwrap()
}

#[test]
fn fresh_loss_is_finite_and_positive() {
    let mut t = trainer(0);
    let log = t.step().unwrap();
    assert!(log.loss.is_finite() && log.loss > 0.0);
    assert!(log.clicks_used >= 2);
    assert_eq!(log.step, 0);
}

#[test]
fn equal_seeds_equal_trajectories() {
    let run = |seed| {
        let mut t = trainer(seed);
        let losses: Vec<f64> = (0..3).map(|_| t.step().unwrap().loss).collect();
        (losses, to_bytes(&t.model, None).unwrap())
    };
    let (a, ca) = run(5);
    let (b, cb) = run(5);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_ne!(run(6).0, a);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let mut full = trainer(9);
    for _ in 0..4 {
        full.step().unwrap();
    }
    let mut first = trainer(9);
    for _ in 0..2 {
        first.step().unwrap();
    }
    let state = TrainState { config: first.cfg.clone(), step: first.step, adam: first.adam.clone() };
    let bytes = to_bytes(&first.model, Some(&state)).unwrap();
    let ck = from_bytes(&bytes).unwrap();
    let ts = ck.train.unwrap();
    let mut resumed = Trainer::new(ck.model, ts.config, synth_train_set(4, 32, 2)).unwrap();
    resumed.step = ts.step;
    resumed.adam = ts.adam;
    for _ in 0..2 {
        resumed.step().unwrap();
    }
    assert_eq!(to_bytes(&resumed.model, None).unwrap(), to_bytes(&full.model, None).unwrap());
    assert_eq!(resumed.adam, full.adam);
}

#[test]
fn previous_round_feedback_is_gradient_isolated() {
    let model = Model::init(small_cfg(), 3).unwrap();
    let s = &synth_train_set(1, 32, 8)[0];
    let mut st = InteractionState::new();
    st.push(first_click(&s.gt).unwrap(), 32, 32).unwrap();
    // Round k-1 once with a tracking tape, once without.
    let prev = |track: bool| {
        let mut ctx = Ctx::new(&model.params, track);
        let p = model.net.forward_state(&mut ctx, &s.image, &st).unwrap();
        BitMask::binarize(ctx.value(p), MASK_THRESHOLD).unwrap()
    };
    let grads = |prev_mask: BitMask| {
        let mut st2 = st.clone();
        st2.set_prev_mask(Some(prev_mask));
        let mut ctx = Ctx::new(&model.params, true);
        let p = model.net.forward_state(&mut ctx, &s.image, &st2).unwrap();
        let l = nfl_loss(&mut ctx.tape, p, &s.gt, 2.0).unwrap();
        ctx.tape.backward(l).unwrap();
        ctx.param_grads()
    };
    assert_eq!(grads(prev(true)), grads(prev(false)));
    assert_eq!(prev(true), BitMask::binarize(&model.predict(&s.image, &st).unwrap(), MASK_THRESHOLD).unwrap());
}

#[test]
fn adam_replays_bitwise() {
    let model = Model::init(small_cfg(), 1).unwrap();
    let run = || {
        let mut p = model.params.clone();
        let mut st = AdamState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let g: Vec<Vec<f64>> = p
                .tensors()
                .iter()
                .map(|t| (0..t.numel()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
                .collect();
            icmf_core::training::adam_step(&mut p, &g, &mut st, 1e-3, 0.9, 0.99, 1e-8);
        }
        (p, st)
    };
    assert_eq!(run(), run());
}

fn sample() -> TrainSample {
    synth_train_set(1, 32, 21).remove(0)
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let s = sample();
    assert_eq!(Augmentation::IDENTITY.apply(&s), s);
}

#[test]
fn flips_and_rotations_invert_exactly() {
    let s = sample();
    let flip = Augmentation { flip: true, ..Augmentation::IDENTITY };
    assert_eq!(flip.apply(&flip.apply(&s)), s);
    for k in 0..4 {
        for f in [false, true] {
            let a = Augmentation { flip: f, quarter_turns: k, ..Augmentation::IDENTITY };
            let out = a.apply(&s);
            // Inverse: undo the rotation, then the flip.
            let mut back = rot90_mask(&out.gt, 4 - k);
            if f {
                back = flip_mask(&back);
            }
            assert_eq!(iou(&back, &s.gt).unwrap(), 1.0);
        }
    }
}

#[test]
fn scaled_crop_keeps_some_foreground() {
    let s = sample();
    let a = Augmentation { scale: 1.25, offset: (-4, -4), ..Augmentation::IDENTITY };
    let out = a.apply(&s);
    assert!(out.gt.area() >= 1);
    assert_eq!(out.image.shape(), s.image.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let o = augment(&s, &mut rng);
        assert!(!o.gt.is_empty());
        assert!(o.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn invalid_config_rejected() {
    let bad = TrainConfig { lr: 0.0, ..TrainConfig::desk() };
    assert!(Trainer::new(Model::init(small_cfg(), 0).unwrap(), bad, synth_train_set(1, 32, 0)).is_err());
    let cfg = TrainConfig::desk();
    assert!(Trainer::new(Model::init(small_cfg(), 0).unwrap(), cfg, vec![]).is_err());
}
