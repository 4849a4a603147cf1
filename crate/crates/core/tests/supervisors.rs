mod common;

use std::cell::RefCell;
use std::f64::consts::LN_2;
use std::rc::Rc;

use common::tasks::*;
use pretext::data::{Batch, Dataset, Item};
use pretext::imaging::{AugSpec, Image};
use pretext::nn::ModuleGraph;
use pretext::supervisors::*;
use pretext::tensor::{Precision, Tape, Tensor};
use pretext::Error;

fn zero_trainable(g: &mut ModuleGraph) {
    for p in g.entries_mut() {
        if p.trainable {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn train_state(sup: &mut Supervisor) -> TrainState {
    sup.init_data_optimizer(&TrainConfig::default(), &CancelToken::new()).unwrap()
}

fn step(sup: &mut Supervisor, state: &mut TrainState, batch: &Batch) -> f64 {
    let mut tape = Tape::new(Precision::Single);
    let loss = sup.forward(&mut tape, batch).unwrap();
    sup.update(&mut tape, &loss, state).unwrap();
    loss.value
}

fn param_snapshot(sup: &Supervisor) -> Vec<Vec<f64>> {
    sup.graphs().iter().flat_map(|(_, g)| g.entries().into_iter().map(|p| p.value.data().to_vec())).collect()
}

#[test]
fn task_losses_match_finite_differences() {
    for kind in TaskKind::ALL {
        let err = task_grad_error(kind).unwrap();
        assert!(err < 1e-5, "{kind}: relative gradient error {err:.3e}");
    }
}

#[test]
fn one_step_is_bit_reproducible() {
    let ds = synth(8, 32, 1);
    let batch = first_batch(&ds, 4);
    for kind in TaskKind::ALL {
        let run = || {
            let mut sup = Supervisor::for_dataset(kind, &ds, 7).unwrap();
            let mut state = train_state(&mut sup);
            let loss = step(&mut sup, &mut state, &batch);
            (loss, sup)
        };
        let (la, a) = run();
        let (lb, b) = run();
        assert_eq!(la.to_bits(), lb.to_bits(), "{kind}");
        assert!(la.is_finite() && la >= 0.0, "{kind}: {la}");
        assert!(same_parameters(&a, &b), "{kind}");
    }
}

#[test]
fn classification_tasks_are_calibrated_at_uniform_logits() {
    let ds = synth(6, 32, 2);
    let batch = first_batch(&ds, 6);
    for (kind, classes) in [(TaskKind::RotateNet, 4.0), (TaskKind::Jigsaw, 24.0), (TaskKind::ExemplarNet, 6.0)] {
        let mut sup = Supervisor::for_dataset(kind, &ds, 0).unwrap();
        zero_trainable(sup.graph_mut("head").unwrap());
        let loss = double_loss(&mut sup, &batch).unwrap();
        let want = f64::ln(classes);
        assert!((loss - want).abs() < 1e-4, "{kind}: {loss} vs ln {classes} = {want}");
    }
}

#[test]
fn jigsaw_with_identity_only_has_zero_loss() {
    let ds = synth(4, 16, 0);
    let mut cfg = tiny_config(TaskKind::Jigsaw);
    cfg.permutations = 1;
    let mut sup = Supervisor::new(TaskKind::Jigsaw, DataInfo::of(&ds), cfg, 0).unwrap();
    assert_eq!(double_loss(&mut sup, &first_batch(&ds, 4)).unwrap(), 0.0);
}

#[test]
fn cpc_pair_counts() {
    let per_image = |g: usize, k: usize| cpc_pairs(g, k).len() * g;
    assert_eq!(per_image(4, 2), 20);
    assert_eq!(per_image(2, 1), 2);
    assert_eq!(cpc_pairs(2, 1), vec![(0, 1)]);
}

#[test]
fn cpc_rejects_a_single_image_batch() {
    let ds = synth(4, 32, 0);
    let mut sup = Supervisor::for_dataset(TaskKind::Cpc, &ds, 0).unwrap();
    assert!(sup.prepare(&first_batch(&ds, 1)).is_err());
    assert_eq!(sup.min_batch(), 2);
}

#[test]
fn trailing_single_image_batches_are_skipped() {
    let ds = synth(10, 16, 0).subset(&(0..9).collect::<Vec<_>>()).unwrap();
    let mut cfg = tiny_config(TaskKind::Cpc);
    cfg.cpc_grid = 2;
    cfg.cpc_offsets = 1;
    let mut sup = Supervisor::new(TaskKind::Cpc, DataInfo::of(&ds), cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let train = TrainConfig { epochs: 1, batch_size: 4, name: dir.path().join("cpc"), ..Default::default() };
    let report = sup.supervise(&ds, &train).unwrap();
    assert_eq!(report.skipped_batches, 1);
    assert_eq!(report.step_losses.len(), 2);
}

#[test]
fn denoise_matches_a_constant_half_prediction() {
    let ds = synth(4, 16, 5);
    let mut sup = tiny_supervisor(TaskKind::Denoise, &ds);
    zero_trainable(sup.graph_mut("head").unwrap());
    let prepared = sup.prepare(&first_batch(&ds, 4)).unwrap();
    let Prepared::Denoise { clean, .. } = &prepared else { panic!("unexpected prepared inputs") };
    let want = clean.data().iter().map(|v| (0.5 - v).powi(2)).sum::<f64>() / clean.data().len() as f64;
    let mut tape = Tape::new(Precision::Double);
    let (loss, _) = sup.loss(&mut tape, &prepared).unwrap();
    assert!((loss.value - want).abs() < 1e-12, "{} vs {want}", loss.value);
}

#[test]
fn splitbrain_gray_images_have_near_zero_color_loss() {
    let base = synth(4, 16, 6);
    let items = base
        .items()
        .iter()
        .map(|it| {
            let img = &it.image;
            let mut px = Vec::new();
            for p in img.pixels().chunks(3) {
                let g = (p[0] + p[1] + p[2]) / 3.0;
                px.extend([g, g, g]);
            }
            Item { image: Image::new(img.height(), img.width(), 3, px).unwrap(), label: None, source: it.source.clone() }
        })
        .collect();
    let ds = Dataset::new(items).unwrap();
    let mut sup = tiny_supervisor(TaskKind::SplitBrain, &ds);
    zero_trainable(sup.graph_mut("l_head").unwrap());
    let prepared = sup.prepare(&first_batch(&ds, 4)).unwrap();
    let (loss, _) = sup.loss(&mut Tape::new(Precision::Double), &prepared).unwrap();
    let l_to_ab = loss.components.iter().find(|(n, _)| *n == "l_to_ab").unwrap().1;
    let ab_to_l = loss.components.iter().find(|(n, _)| *n == "ab_to_l").unwrap().1;
    assert!(l_to_ab < 1e-8, "{l_to_ab}");
    assert!(ab_to_l > 1e-4);
    assert_eq!(sup.get_backbone().unwrap().feature_dim(), 3 + 3);
}

#[test]
fn untrained_discriminators_sit_near_chance() {
    let ds = synth(16, 32, 4);
    for kind in [TaskKind::Context, TaskKind::BiGan] {
        let mut sup = Supervisor::for_dataset(kind, &ds, 0).unwrap();
        train_state(&mut sup);
        let prepared = sup.prepare(&first_batch(&ds, 16)).unwrap();
        let d = sup.discriminator_step(&prepared).unwrap().unwrap();
        // bce at logit s is about ln 2 + s²/8, so small initial logits keep both terms near ln 2.
        assert!((d - 2.0 * LN_2).abs() < 0.2, "{kind}: d_loss {d}");
    }
}

#[test]
fn bigan_shapes() {
    let ds = synth(4, 16, 0);
    let sup = tiny_supervisor(TaskKind::BiGan, &ds);
    let enc = sup.get_backbone().unwrap();
    assert_eq!(enc.feature_dim(), sup.task_config().z_dim);
    let generator = sup.graph("generator").unwrap();
    let mut tape = Tape::new(Precision::Single);
    let z = pretext::tensor::Tensor::new(&[3, 4], pretext::tensor::Init::Normal { mean: 0.0, std: 3.0, seed: 1 }).unwrap();
    let zv = tape.constant(&z).unwrap();
    let img = generator.forward_eval(&mut tape, zv).unwrap();
    assert_eq!(tape.shape(img), &[3, 3, 16, 16]);
    assert!(tape.value(img).iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn byol_aligned_views_with_identity_predictor_have_zero_loss() {
    let ds = synth(4, 16, 0);
    let mut cfg = tiny_config(TaskKind::Byol);
    cfg.augment = Some(AugSpec::identity());
    let mut sup = Supervisor::new(TaskKind::Byol, DataInfo::of(&ds), cfg, 0).unwrap();
    let d = sup.task_config().embed_dim;
    for p in sup.graph_mut("predictor").unwrap().entries_mut() {
        let shape = p.value.shape().to_vec();
        p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| {
            *v = if shape.len() == 2 && i / d == i % d { 1.0 } else { 0.0 };
        });
    }
    let loss = double_loss(&mut sup, &first_batch(&ds, 4)).unwrap();
    assert!(loss.abs() < 1e-9, "{loss}");
}

#[test]
fn pirl_lambda_routes_gradient_to_one_head() {
    let ds = synth(4, 16, 0);
    for (lambda, silent) in [(0.0, "jig_head"), (1.0, "head")] {
        let mut cfg = tiny_config(TaskKind::Pirl);
        cfg.pirl_lambda = lambda;
        let mut sup = Supervisor::new(TaskKind::Pirl, DataInfo::of(&ds), cfg, 0).unwrap();
        let prepared = sup.prepare(&first_batch(&ds, 4)).unwrap();
        let mut tape = Tape::new(Precision::Double);
        let (loss, _) = sup.loss(&mut tape, &prepared).unwrap();
        tape.backward(loss.loss).unwrap();
        let parts: Vec<f64> = loss.components.iter().filter(|(n, _)| *n != "loss").map(|c| c.1).collect();
        let expect = lambda * parts[0] + (1.0 - lambda) * parts[1];
        assert!((loss.value - expect).abs() < 1e-12);
        for p in sup.graph(silent).unwrap().entries() {
            let g = tape.param_grad(p.id()).unwrap_or(&[]);
            assert!(g.iter().all(|v| *v == 0.0), "lambda {lambda}: {silent} got gradient");
        }
    }
}

#[test]
fn moc_queue_replays_pushed_keys() {
    let ds = synth(16, 8, 0);
    let mut cfg = tiny_config(TaskKind::Moc);
    cfg.queue_size = 20;
    let mut sup = Supervisor::new(TaskKind::Moc, DataInfo::of(&ds), cfg, 0).unwrap();
    let batch = first_batch(&ds, 8);
    let mut pushed: Vec<Vec<f64>> = Vec::new();
    for b in 1..=4usize {
        let prepared = sup.prepare(&batch).unwrap();
        let (loss, effects) = sup.loss(&mut Tape::new(Precision::Single), &prepared).unwrap();
        if b == 1 {
            assert_eq!(loss.value, 0.0);
        }
        pushed.extend(effects.queue.iter().cloned());
        sup.apply_effects(effects).unwrap();
        let queue = sup.queue().unwrap();
        assert_eq!(queue.len(), (8 * b).min(20));
        assert_eq!(queue.snapshot(), pushed[pushed.len().saturating_sub(20)..].to_vec());
        for k in queue.snapshot() {
            let n: f64 = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn moc_default_queue_fills_batch_by_batch() {
    let ds = synth(16, 8, 0);
    let mut cfg = tiny_config(TaskKind::Moc);
    cfg.queue_size = 1024;
    let mut sup = Supervisor::new(TaskKind::Moc, DataInfo::of(&ds), cfg, 0).unwrap();
    let mut state = train_state(&mut sup);
    for b in 1..=3 {
        step(&mut sup, &mut state, &first_batch(&ds, 16));
        assert_eq!(sup.queue().unwrap().len(), (b * 16).min(1024));
    }
}

#[test]
fn memory_banks_stay_unit_norm_over_an_epoch() {
    let ds = synth(20, 8, 0);
    let dir = tempfile::tempdir().unwrap();
    for kind in [TaskKind::Id, TaskKind::Cmc, TaskKind::Pirl] {
        let mut sup = tiny_supervisor(kind, &ds);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, name: dir.path().join(kind.name()), ..Default::default() };
        sup.supervise(&ds, &cfg).unwrap();
        let mut banks = vec![sup.memory_bank().unwrap()];
        banks.extend(sup.memory_bank_ab());
        for bank in banks {
            assert_eq!(bank.len(), ds.len());
            for i in 0..bank.len() {
                let n: f64 = bank.lookup(i).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5, "{kind} row {i}: {n}");
            }
        }
    }
}

#[test]
fn frozen_online_net_gives_closed_form_targets() {
    let ds = synth(8, 8, 0);
    for kind in [TaskKind::Moc, TaskKind::Byol] {
        let mut cfg = tiny_config(kind);
        cfg.momentum = 0.9;
        let mut sup = Supervisor::new(kind, DataInfo::of(&ds), cfg, 0).unwrap();
        for (i, p) in sup.graph_mut("target_backbone").unwrap().entries_mut().into_iter().enumerate() {
            p.value.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v += 0.25 * (((i * 31 + j) % 7) as f64 - 3.0));
        }
        for name in ["backbone", "head"] {
            sup.graph_mut(name).unwrap().set_trainable(false);
        }
        let online: Vec<Vec<f64>> = sup.graph("backbone").unwrap().entries().iter().map(|p| p.value.data().to_vec()).collect();
        let start: Vec<Vec<f64>> =
            sup.graph("target_backbone").unwrap().entries().iter().map(|p| p.value.data().to_vec()).collect();
        let mut state = train_state(&mut sup);
        let t = 30;
        for _ in 0..t {
            step(&mut sup, &mut state, &first_batch(&ds, 8));
        }
        let mt = 0.9f64.powi(t);
        let now = sup.graph("target_backbone").unwrap().entries();
        for ((p, th), t0) in now.iter().zip(&online).zip(&start) {
            for ((v, a), b) in p.value.data().iter().zip(th).zip(t0) {
                let want = a + mt * (b - a);
                assert!((v - want).abs() < 1e-6, "{kind}: {v} vs {want}");
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(8, 16, 0);
    for kind in TaskKind::ALL {
        let mut sup = tiny_supervisor(kind, &ds);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, name: dir.path().join(kind.name()), ..Default::default() };
        sup.supervise(&ds, &cfg).unwrap();
        let loaded = load_supervisor(kind, &cfg.name).unwrap();
        assert!(same_parameters(&sup, &loaded), "{kind}");
        assert_eq!(loaded.task_config(), sup.task_config());
        let (a, b) = (sup.get_backbone().unwrap(), loaded.get_backbone().unwrap());
        let bits = |g: &ModuleGraph| -> Vec<u64> {
            g.entries().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b), "{kind}");
        assert_eq!(load_any_supervisor(&cfg.name).unwrap().kind(), kind);
    }
}

#[test]
fn loading_the_wrong_task_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(4, 16, 0);
    let sup = tiny_supervisor(TaskKind::RotateNet, &ds);
    let path = dir.path().join("rot");
    sup.save(&path, None).unwrap();
    assert!(matches!(load_supervisor(TaskKind::Jigsaw, &path), Err(Error::Checkpoint(_))));
    let mut other = tiny_supervisor(TaskKind::Denoise, &ds);
    assert!(other.load_pretrained(&path, true).is_err());
}

#[test]
fn pretrained_weights_are_restored_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(4, 16, 0);
    let path = dir.path().join("rot");
    let donor = Supervisor::new(TaskKind::RotateNet, DataInfo::of(&ds), tiny_config(TaskKind::RotateNet), 99).unwrap();
    donor.save(&path, None).unwrap();
    let mut sup = tiny_supervisor(TaskKind::RotateNet, &ds);
    assert!(!same_parameters(&sup, &donor));
    let cfg = TrainConfig { epochs: 0, pretrained: true, name: path.clone(), ..Default::default() };
    sup.supervise(&ds, &cfg).unwrap();
    assert!(same_parameters(&sup, &donor));
    let missing = TrainConfig { pretrained: true, name: dir.path().join("nothing"), ..cfg };
    assert!(sup.supervise(&ds, &missing).is_err());
}

#[test]
fn zero_epochs_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(4, 16, 0);
    let mut sup = tiny_supervisor(TaskKind::Id, &ds);
    let cfg = TrainConfig { epochs: 0, name: dir.path().join("nested/id"), ..Default::default() };
    let report = sup.supervise(&ds, &cfg).unwrap();
    assert_eq!(report.epochs_completed, 0);
    assert!(!report.interrupted);
    assert!(same_parameters(&sup, &load_supervisor(TaskKind::Id, &cfg.name).unwrap()));
}

/// Cancels after a fixed number of updates and keeps the parameters seen
/// right after the last one.
struct CancelAfter {
    sup: Supervisor,
    after: usize,
    done: usize,
    token: CancelToken,
    last: Rc<RefCell<Vec<Vec<f64>>>>,
}

impl Lifecycle for CancelAfter {
    fn supervisor(&mut self) -> &mut Supervisor {
        &mut self.sup
    }

    fn update(&mut self, tape: &mut Tape, loss: &StepLoss, state: &mut TrainState) -> pretext::Result<()> {
        self.sup.update(tape, loss, state)?;
        self.done += 1;
        *self.last.borrow_mut() = param_snapshot(&self.sup);
        if self.done == self.after {
            self.token.cancel();
        }
        Ok(())
    }
}

#[test]
fn cancelling_mid_epoch_saves_the_last_update() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(20, 16, 0);
    for kind in [TaskKind::RotateNet, TaskKind::Byol] {
        let token = CancelToken::new();
        let last = Rc::new(RefCell::new(Vec::new()));
        let mut host =
            CancelAfter { sup: tiny_supervisor(kind, &ds), after: 7, done: 0, token: token.clone(), last: last.clone() };
        let cfg = TrainConfig { epochs: 5, batch_size: 4, name: dir.path().join(kind.name()), ..Default::default() };
        let report = supervise(&mut host, &ds, &cfg, &token).unwrap();
        assert!(report.interrupted);
        assert_eq!(report.epochs_completed, 1);
        assert_eq!(report.step_losses.len(), 7);
        let loaded = load_supervisor(kind, &cfg.name).unwrap();
        assert_eq!(param_snapshot(&loaded), *last.borrow(), "{kind}");
    }
}

#[test]
fn a_cancelled_token_before_training_writes_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(4, 16, 0);
    let mut sup = tiny_supervisor(TaskKind::RotateNet, &ds);
    let token = CancelToken::new();
    token.cancel();
    let cfg = TrainConfig { epochs: 3, name: dir.path().join("rot"), ..Default::default() };
    let report = supervise(&mut sup, &ds, &cfg, &token).unwrap();
    assert!(report.interrupted);
    assert!(report.step_losses.is_empty());
    assert!(same_parameters(&sup, &load_supervisor(TaskKind::RotateNet, &cfg.name).unwrap()));
}

#[test]
fn mismatched_data_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(8, 16, 0);
    let mut sup = tiny_supervisor(TaskKind::Id, &ds);
    let cfg = TrainConfig { epochs: 1, name: dir.path().join("id"), ..Default::default() };
    let smaller = ds.subset(&[0, 1, 2]).unwrap();
    assert!(matches!(sup.supervise(&smaller, &cfg), Err(Error::Data(_))));
    let bigger = synth(8, 32, 0);
    assert!(matches!(sup.supervise(&bigger, &cfg), Err(Error::Data(_))));
    assert!(!cfg.name.exists());
}

#[test]
fn task_names_parse_and_unknown_names_list_the_options() {
    for kind in TaskKind::ALL {
        assert_eq!(kind.name().parse::<TaskKind>().unwrap(), kind);
    }
    let err = "nosuch".parse::<TaskKind>().unwrap_err().to_string();
    for kind in TaskKind::ALL {
        assert!(err.contains(kind.name()), "{err}");
    }
}

#[test]
fn train_config_defaults() {
    let c = TrainConfig::default();
    assert_eq!(c.lr, 1e-3);
    assert_eq!(c.epochs, 10);
    assert_eq!(c.batch_size, 32);
    assert!(c.shuffle);
    assert_eq!(c.num_workers, 0);
    assert_eq!(c.lr_schedule, StepLr { step_size: 100, gamma: 1.0 });
    let parsed: TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(parsed, c);
}

#[test]
fn invalid_task_configs_are_rejected() {
    let ds = synth(4, 16, 0);
    let mut cfg = TaskConfig::new(TaskKind::Moc);
    cfg.temperature = 0.0;
    assert!(matches!(Supervisor::new(TaskKind::Moc, DataInfo::of(&ds), cfg, 0), Err(Error::Config(_))));
    let mut cfg = TaskConfig::new(TaskKind::ExemplarNet);
    cfg.exemplar_cap = 3;
    assert!(Supervisor::new(TaskKind::ExemplarNet, DataInfo::of(&ds), cfg, 0).is_err());
}

#[test]
fn features_have_the_backbone_width() {
    let ds = synth(3, 16, 0);
    for kind in TaskKind::ALL {
        let sup = tiny_supervisor(kind, &ds);
        let images: Vec<Image> = ds.items().iter().map(|i| i.image.clone()).collect();
        let f: Tensor = sup.features(&images).unwrap();
        assert_eq!(f.shape(), &[images.len(), sup.get_backbone().unwrap().feature_dim()], "{kind}");
    }
}
