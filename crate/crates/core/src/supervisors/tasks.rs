use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use super::nets::Nets;
use super::{StepLoss, Supervisor, TaskKind};
use crate::contrastive::{info_nce, Negatives};
use crate::data::Batch;
use crate::error::{invalid, shape_err, Error, Result};
use crate::imaging::{
    erase_rects, gaussian_noise, images_to_tensor, jigsaw_shuffle, random_resized_crop, rgb_to_lab, rotate90,
    extract_patch_grid, AugSpec, AugStep, Image,
};
use crate::nn::{ModuleGraph, Mode};
use crate::tensor::{Tape, Tensor, Var};

const EPS: f64 = 1e-12;

/// Random inputs of one step, drawn before any network runs so that the
/// discriminator and generator sides of a step see the same samples.
#[derive(Clone, Debug)]
pub enum Prepared {
    Classify { input: Tensor, targets: Vec<usize> },
    Denoise { noisy: Tensor, clean: Tensor },
    Context { erased: Tensor, clean: Tensor, mask: Tensor },
    SplitBrain { l: Tensor, ab: Tensor },
    BiGan { real: Tensor, z: Tensor },
    Id { indices: Vec<usize>, view: Tensor, negatives: Vec<Vec<usize>> },
    /// Patches ordered (image, row, column); negatives hold one list per query.
    Cpc { patches: Tensor, batch: usize, negatives: Vec<Vec<usize>> },
    TwoView { v1: Tensor, v2: Tensor },
    Cmc { indices: Vec<usize>, l: Tensor, ab: Tensor, negatives: Vec<Vec<usize>> },
    Pirl { indices: Vec<usize>, orig: Tensor, jig: Tensor, negatives: Vec<Vec<usize>> },
}

/// Writes to banks and queues produced by a step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Effects {
    pub bank: Vec<(usize, Vec<f64>)>,
    pub bank_ab: Vec<(usize, Vec<f64>)>,
    pub queue: Vec<Vec<f64>>,
}

/// `(context row, offset)` pairs predicted by CPC on a `grid × grid` layout;
/// each pair is scored once per column.
pub fn cpc_pairs(grid: usize, offsets: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..grid.saturating_sub(1) {
        for k in 1..=offsets {
            if r + k < grid {
                out.push((r, k));
            }
        }
    }
    out
}

/// Stacks selected channels of the scaled Lab images.
pub(super) fn lab_tensor(images: &[Image], channels: &[usize]) -> Result<Tensor> {
    let lab: Vec<Image> = images
        .iter()
        .map(|img| rgb_to_lab(img)?.scaled().select_channels(channels))
        .collect::<Result<_>>()?;
    images_to_tensor(&lab)
}

fn rows(data: &[f64], d: usize) -> Vec<Vec<f64>> {
    data.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Per-query negatives from the bank, at most `wanted`, never the query's own row.
fn sample_bank_negatives<R: Rng + ?Sized>(sup_len: usize, indices: &[usize], wanted: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let m = wanted.min(sup_len.saturating_sub(1));
    indices
        .iter()
        .map(|&i| {
            if m == 0 {
                return Vec::new();
            }
            sample(rng, sup_len - 1, m).into_iter().map(|j| if j >= i { j + 1 } else { j }).collect()
        })
        .collect()
}

fn bank_negatives(tape: &mut Tape, bank: &crate::contrastive::MemoryBank, negs: &[Vec<usize>]) -> Result<Negatives> {
    let m = negs.first().map_or(0, Vec::len);
    if m == 0 {
        return Ok(Negatives::None);
    }
    let flat: Vec<usize> = negs.concat();
    let t = bank.rows(&flat)?.reshaped(&[negs.len(), m, bank.dim()])?;
    Ok(Negatives::PerQuery(tape.constant(&t)?))
}

fn normalized(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.l2_normalize(x, 1, EPS)
}

fn constant_rows(tape: &mut Tape, bank: &crate::contrastive::MemoryBank, indices: &[usize]) -> Result<Var> {
    let t = bank.rows(indices)?;
    tape.constant(&t)
}

fn jigsaw_view<R: Rng + ?Sized>(img: &Image, perm: &[usize], rng: &mut R) -> Result<Image> {
    let cell = img.height().min(img.width()) / 3;
    let color = AugSpec {
        steps: vec![
            AugStep::ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4 },
            AugStep::FlipGray { p_flip: 0.5, p_gray: 0.25 },
        ],
    };
    let mut canvas = Image::filled(3 * cell, 3 * cell, img.channels(), 0.0)?;
    for slot in 0..9 {
        let (y, x) = ((slot / 3) * cell, (slot % 3) * cell);
        let patch = img.crop(y, x, cell, cell)?;
        let patch = random_resized_crop(&patch, (0.6, 1.0), (3.0 / 4.0, 4.0 / 3.0), cell, rng)?;
        canvas.paste(&color.apply(&patch, rng)?, y, x)?;
    }
    jigsaw_shuffle(&canvas, perm, 3)
}

pub(super) fn prepare(sup: &mut Supervisor, batch: &Batch) -> Result<Prepared> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let res = sup.info.resolution;
    let task = &sup.task;
    let rng = &mut sup.rng;
    let images = &batch.images;
    let idx = &batch.indices;
    Ok(match sup.kind {
        TaskKind::RotateNet => {
            let targets: Vec<usize> = images.iter().map(|_| rng.random_range(0..4)).collect();
            let rotated: Vec<Image> = images.iter().zip(&targets).map(|(img, &k)| rotate90(img, k as i64)).collect();
            Prepared::Classify { input: images_to_tensor(&rotated)?, targets }
        }
        TaskKind::ExemplarNet => {
            let mut spec = task.augment_for(res);
            if task.exemplar_patch_mode {
                for step in &mut spec.steps {
                    if let AugStep::ResizedCrop { scale, .. } = step {
                        *scale = (0.1, 0.3);
                    }
                }
            }
            let views: Vec<Image> = images.iter().map(|img| spec.apply(img, rng)).collect::<Result<_>>()?;
            Prepared::Classify { input: images_to_tensor(&views)?, targets: idx.clone() }
        }
        TaskKind::Jigsaw => {
            let perms = sup.state.perms.as_ref().expect("jigsaw has a table");
            let grid = task.jigsaw_grid;
            let targets: Vec<usize> = images.iter().map(|_| rng.random_range(0..perms.len())).collect();
            let shuffled: Vec<Image> = images
                .iter()
                .zip(&targets)
                .map(|(img, &p)| jigsaw_shuffle(img, &perms.perms[p], grid))
                .collect::<Result<_>>()?;
            Prepared::Classify { input: images_to_tensor(&shuffled)?, targets }
        }
        TaskKind::Denoise => {
            let noisy: Vec<Image> = images.iter().map(|img| gaussian_noise(img, task.noise_sigma, rng)).collect();
            Prepared::Denoise { noisy: images_to_tensor(&noisy)?, clean: images_to_tensor(images)? }
        }
        TaskKind::Context => {
            let mut erased = Vec::with_capacity(images.len());
            let mut mask = Vec::new();
            for img in images {
                let fill = vec![0.5; img.channels()];
                let (e, m) = erase_rects(img, task.erase_count, task.erase_area, &fill, rng)?;
                for _ in 0..img.channels() {
                    mask.extend(m.iter().map(|&v| v as f64));
                }
                erased.push(e);
            }
            if !mask.iter().any(|&m| m > 0.0) {
                return invalid("context erasing produced an empty mask");
            }
            let clean = images_to_tensor(images)?;
            let mask = Tensor::from_vec(clean.shape(), mask)?;
            Prepared::Context { erased: images_to_tensor(&erased)?, clean, mask }
        }
        TaskKind::SplitBrain => {
            Prepared::SplitBrain { l: lab_tensor(images, &[0])?, ab: lab_tensor(images, &[1, 2])? }
        }
        TaskKind::BiGan => {
            let z: Vec<f64> = (0..images.len() * task.z_dim).map(|_| rng.sample(StandardNormal)).collect();
            Prepared::BiGan { real: images_to_tensor(images)?, z: Tensor::from_vec(&[images.len(), task.z_dim], z)? }
        }
        TaskKind::Id => {
            let spec = task.augment_for(res);
            let views: Vec<Image> = images.iter().map(|img| spec.apply(img, rng)).collect::<Result<_>>()?;
            let negatives = sample_bank_negatives(sup.info.len, idx, task.negatives, rng);
            Prepared::Id { indices: idx.clone(), view: images_to_tensor(&views)?, negatives }
        }
        TaskKind::Cpc => {
            let b = images.len();
            if b < 2 {
                return invalid("cpc draws negatives from other images and needs a batch of at least 2");
            }
            let g = task.cpc_grid;
            let cell = res / g;
            let spec = AugSpec::cpc(cell);
            let mut patches = Vec::with_capacity(b * g * g);
            for img in images {
                for p in extract_patch_grid(img, g, cell, 0, rng)? {
                    patches.push(spec.apply(&p, rng)?);
                }
            }
            let per_image = g * g;
            let queries = cpc_pairs(g, task.cpc_offsets).len() * b * g;
            let m = task.negatives.min((b - 1) * per_image);
            let negatives = (0..queries)
                .map(|q| {
                    let image = (q % (b * g)) / g;
                    sample(rng, (b - 1) * per_image, m)
                        .into_iter()
                        .map(|j| if j >= image * per_image { j + per_image } else { j })
                        .collect()
                })
                .collect();
            Prepared::Cpc { patches: images_to_tensor(&patches)?, batch: b, negatives }
        }
        TaskKind::Moc | TaskKind::Byol => {
            let spec = task.augment_for(res);
            let mut v1 = Vec::with_capacity(images.len());
            let mut v2 = Vec::with_capacity(images.len());
            for img in images {
                v1.push(spec.apply(img, rng)?);
                v2.push(spec.apply(img, rng)?);
            }
            Prepared::TwoView { v1: images_to_tensor(&v1)?, v2: images_to_tensor(&v2)? }
        }
        TaskKind::Cmc => {
            let spec = task.augment_for(res);
            let views: Vec<Image> = images.iter().map(|img| spec.apply(img, rng)).collect::<Result<_>>()?;
            let negatives = sample_bank_negatives(sup.info.len, idx, task.negatives, rng);
            Prepared::Cmc {
                indices: idx.clone(),
                l: lab_tensor(&views, &[0])?,
                ab: lab_tensor(&views, &[1, 2])?,
                negatives,
            }
        }
        TaskKind::Pirl => {
            let perms = sup.state.perms.as_ref().expect("pirl has a table");
            let spec = task.augment_for(res);
            let mut orig = Vec::with_capacity(images.len());
            let mut jig = Vec::with_capacity(images.len());
            for img in images {
                orig.push(spec.apply(img, rng)?);
                let p = rng.random_range(0..perms.len());
                jig.push(jigsaw_view(img, &perms.perms[p], rng)?);
            }
            let negatives = sample_bank_negatives(sup.info.len, idx, task.negatives, rng);
            Prepared::Pirl { indices: idx.clone(), orig: images_to_tensor(&orig)?, jig: images_to_tensor(&jig)?, negatives }
        }
    })
}

fn step_loss(tape: &Tape, loss: Var, extra: Vec<(&'static str, f64)>) -> Result<StepLoss> {
    let value = tape.item(loss)?;
    let mut components = vec![("loss", value)];
    components.extend(extra);
    Ok(StepLoss { loss, value, components })
}

fn mismatch(kind: TaskKind) -> Error {
    Error::Invalid(format!("prepared inputs do not belong to {kind}"))
}

/// `Σ mask·(pred − target)² / Σ mask`.
fn masked_mse(tape: &mut Tape, pred: Var, target: Var, mask: &Tensor) -> Result<Var> {
    let count: f64 = mask.data().iter().sum();
    if count <= 0.0 {
        return invalid("mask is empty");
    }
    let m = tape.constant(mask)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let masked = tape.mul(sq, m)?;
    let s = tape.sum_all(masked)?;
    tape.mul_scalar(s, 1.0 / count)
}

/// Joint BiGAN discriminator on an image batch and its codes.
fn bigan_disc(tape: &mut Tape, disc_x: &mut ModuleGraph, disc_joint: &mut ModuleGraph, x: Var, z: Var) -> Result<Var> {
    let fx = disc_x.forward(tape, x, Mode::Train)?;
    let joint = tape.concat(&[fx, z], 1)?;
    disc_joint.forward(tape, joint, Mode::Train)
}

pub(super) fn loss(sup: &mut Supervisor, tape: &mut Tape, prepared: &Prepared) -> Result<(StepLoss, Effects)> {
    let kind = sup.kind;
    let tau = sup.task.temperature;
    let mut effects = Effects::default();
    let out = match (&mut sup.nets, prepared) {
        (Nets::Classifier(net), Prepared::Classify { input, targets }) => {
            let x = tape.constant(input)?;
            let logits = net.forward(tape, x, Mode::Train)?;
            let l = tape.cross_entropy(logits, targets)?;
            step_loss(tape, l, vec![])?
        }
        (Nets::AutoEncoder(net), Prepared::Denoise { noisy, clean }) => {
            let x = tape.constant(noisy)?;
            let y = net.forward(tape, x, Mode::Train)?;
            if tape.shape(y) != clean.shape() {
                return shape_err(format!("decoder output {:?} differs from input {:?}", tape.shape(y), clean.shape()));
            }
            let t = tape.constant(clean)?;
            let l = tape.mse(y, t)?;
            step_loss(tape, l, vec![])?
        }
        (Nets::Context { gen, disc }, Prepared::Context { erased, clean, mask }) => {
            let lambda = sup.task.adv_weight;
            let x = tape.constant(erased)?;
            let y = gen.forward(tape, x, Mode::Train)?;
            let t = tape.constant(clean)?;
            let rec = masked_mse(tape, y, t, mask)?;
            let d_fake = disc.forward(tape, y, Mode::Train)?;
            let ones = vec![1.0; tape.value(d_fake).len()];
            let adv = tape.bce_with_logits(d_fake, &ones)?;
            let a = tape.mul_scalar(rec, 1.0 - lambda)?;
            let b = tape.mul_scalar(adv, lambda)?;
            let l = tape.add(a, b)?;
            let (rv, av) = (tape.item(rec)?, tape.item(adv)?);
            step_loss(tape, l, vec![("rec", rv), ("adv", av)])?
        }
        (Nets::SplitBrain { l: net_l, ab: net_ab }, Prepared::SplitBrain { l, ab }) => {
            let lv = tape.constant(l)?;
            let abv = tape.constant(ab)?;
            let pred_ab = net_l.forward(tape, lv, Mode::Train)?;
            let pred_l = net_ab.forward(tape, abv, Mode::Train)?;
            let l_to_ab = tape.mse(pred_ab, abv)?;
            let ab_to_l = tape.mse(pred_l, lv)?;
            let total = tape.add(l_to_ab, ab_to_l)?;
            let (a, b) = (tape.item(l_to_ab)?, tape.item(ab_to_l)?);
            step_loss(tape, total, vec![("l_to_ab", a), ("ab_to_l", b)])?
        }
        (Nets::BiGan { gen, enc, disc_x, disc_joint }, Prepared::BiGan { real, z }) => {
            let x = tape.constant(real)?;
            let zv = tape.constant(z)?;
            let e = enc.forward(tape, x, Mode::Train)?;
            let g = gen.forward(tape, zv, Mode::Train)?;
            let d_real = bigan_disc(tape, disc_x, disc_joint, x, e)?;
            let d_fake = bigan_disc(tape, disc_x, disc_joint, g, zv)?;
            let n = tape.value(d_real).len();
            let real_as_fake = tape.bce_with_logits(d_real, &vec![0.0; n])?;
            let fake_as_real = tape.bce_with_logits(d_fake, &vec![1.0; n])?;
            let l = tape.add(real_as_fake, fake_as_real)?;
            step_loss(tape, l, vec![])?
        }
        (Nets::Embedding(net), Prepared::Id { indices, view, negatives }) => {
            let bank = sup.state.bank.as_ref().expect("id has a bank");
            let x = tape.constant(view)?;
            let h = net.forward(tape, x, Mode::Train)?;
            let q = normalized(tape, h)?;
            let pos = constant_rows(tape, bank, indices)?;
            let negs = bank_negatives(tape, bank, negatives)?;
            let l = info_nce(tape, q, pos, negs, tau)?;
            effects.bank = indices.iter().copied().zip(rows(tape.value(q), bank.dim())).collect();
            step_loss(tape, l, vec![])?
        }
        (Nets::Cpc { net, context, predictors }, Prepared::Cpc { patches, batch, negatives }) => {
            let (b, g) = (*batch, sup.task.cpc_grid);
            let x = tape.constant(patches)?;
            let z = net.backbone.forward(tape, x, Mode::Train)?;
            let fd = tape.shape(z)[1];
            let t = net.predictor.forward(tape, z, Mode::Train)?;
            let t = normalized(tape, t)?;
            let d = tape.shape(t)[1];
            let z4 = tape.reshape(z, &[b, g, g, fd])?;
            let t4 = tape.reshape(t, &[b, g, g, d])?;
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut ctx_cache: Vec<Option<Var>> = vec![None; g];
            for (r, k) in cpc_pairs(g, predictors.len()) {
                let c = match ctx_cache[r] {
                    Some(c) => c,
                    None => {
                        let rows_upto = tape.slice(z4, &[0..b, 0..r + 1, 0..g, 0..fd])?;
                        let mean = tape.mean(rows_upto, &[1], false)?;
                        let flat = tape.reshape(mean, &[b * g, fd])?;
                        let c = context.forward(tape, flat, Mode::Train)?;
                        ctx_cache[r] = Some(c);
                        c
                    }
                };
                let p = predictors[k - 1].forward(tape, c, Mode::Train)?;
                preds.push(normalized(tape, p)?);
                let row = tape.slice(t4, &[0..b, r + k..r + k + 1, 0..g, 0..d])?;
                targets.push(tape.reshape(row, &[b * g, d])?);
            }
            let p = tape.concat(&preds, 0)?;
            let tgt = tape.concat(&targets, 0)?;
            let m = negatives.first().map_or(0, Vec::len);
            let negs = if m == 0 {
                Negatives::None
            } else {
                let sel = tape.index_select(t, &negatives.concat())?;
                Negatives::PerQuery(tape.reshape(sel, &[negatives.len(), m, d])?)
            };
            let l = info_nce(tape, p, tgt, negs, tau)?;
            step_loss(tape, l, vec![])?
        }
        (Nets::Moc { online, target }, Prepared::TwoView { v1, v2 }) => {
            let queue = sup.state.queue.as_ref().expect("moc has a queue");
            let x = tape.constant(v1)?;
            let h = online.forward(tape, x, Mode::Train)?;
            let q = normalized(tape, h)?;
            let mut t = Tape::new(tape.precision());
            let x2 = t.constant(v2)?;
            let k = target.forward(&mut t, x2, Mode::Train)?;
            let k = normalized(&mut t, k)?;
            let k_val = t.tensor(k);
            let kv = tape.constant(&k_val)?;
            let negs = match queue.as_tensor()? {
                Some(n) => Negatives::Shared(tape.constant(&n)?),
                None => Negatives::None,
            };
            let l = info_nce(tape, q, kv, negs, tau)?;
            effects.queue = rows(k_val.data(), k_val.shape()[1]);
            let queued = queue.len() as f64;
            step_loss(tape, l, vec![("negatives", queued)])?
        }
        (Nets::Cmc { l: net_l, ab: net_ab }, Prepared::Cmc { indices, l, ab, negatives }) => {
            let bank_l = sup.state.bank.as_ref().expect("cmc has an L bank");
            let bank_ab = sup.state.bank_ab.as_ref().expect("cmc has an ab bank");
            let lv = tape.constant(l)?;
            let abv = tape.constant(ab)?;
            let hl = net_l.forward(tape, lv, Mode::Train)?;
            let q_l = normalized(tape, hl)?;
            let hab = net_ab.forward(tape, abv, Mode::Train)?;
            let q_ab = normalized(tape, hab)?;
            let pos_ab = constant_rows(tape, bank_ab, indices)?;
            let negs_ab = bank_negatives(tape, bank_ab, negatives)?;
            let term_l = info_nce(tape, q_l, pos_ab, negs_ab, tau)?;
            let pos_l = constant_rows(tape, bank_l, indices)?;
            let negs_l = bank_negatives(tape, bank_l, negatives)?;
            let term_ab = info_nce(tape, q_ab, pos_l, negs_l, tau)?;
            let total = tape.add(term_l, term_ab)?;
            effects.bank = indices.iter().copied().zip(rows(tape.value(q_l), bank_l.dim())).collect();
            effects.bank_ab = indices.iter().copied().zip(rows(tape.value(q_ab), bank_ab.dim())).collect();
            let (a, b) = (tape.item(term_l)?, tape.item(term_ab)?);
            step_loss(tape, total, vec![("l", a), ("ab", b)])?
        }
        (Nets::Byol { online, predictor, target }, Prepared::TwoView { v1, v2 }) => {
            let symmetric = sup.task.byol_symmetric;
            let mut term = |tape: &mut Tape, a: &Tensor, b: &Tensor| -> Result<Var> {
                let x = tape.constant(a)?;
                let h = online.forward(tape, x, Mode::Train)?;
                let p = predictor.forward(tape, h, Mode::Train)?;
                let mut t = Tape::new(tape.precision());
                let bv = t.constant(b)?;
                let zt = target.forward(&mut t, bv, Mode::Train)?;
                let zc = tape.constant(&t.tensor(zt))?;
                crate::contrastive::byol_loss(tape, p, zc)
            };
            let first = term(tape, v1, v2)?;
            let l = if symmetric {
                let second = term(tape, v2, v1)?;
                tape.add(first, second)?
            } else {
                first
            };
            step_loss(tape, l, vec![])?
        }
        (Nets::Pirl { net, jig_head }, Prepared::Pirl { indices, orig, jig, negatives }) => {
            let lambda = sup.task.pirl_lambda;
            let bank = sup.state.bank.as_ref().expect("pirl has a bank");
            let xj = tape.constant(jig)?;
            let fj = net.backbone.forward(tape, xj, Mode::Train)?;
            let hj = jig_head.forward(tape, fj, Mode::Train)?;
            let q_jig = normalized(tape, hj)?;
            let xo = tape.constant(orig)?;
            let ho = net.forward(tape, xo, Mode::Train)?;
            let q_orig = normalized(tape, ho)?;
            let pos = constant_rows(tape, bank, indices)?;
            let negs = bank_negatives(tape, bank, negatives)?;
            let term_jig = info_nce(tape, q_jig, pos, negs, tau)?;
            let term_orig = info_nce(tape, q_orig, pos, negs, tau)?;
            let a = tape.mul_scalar(term_jig, lambda)?;
            let b = tape.mul_scalar(term_orig, 1.0 - lambda)?;
            let l = tape.add(a, b)?;
            effects.bank = indices.iter().copied().zip(rows(tape.value(q_orig), bank.dim())).collect();
            let (jv, ov) = (tape.item(term_jig)?, tape.item(term_orig)?);
            step_loss(tape, l, vec![("jigsaw", jv), ("orig", ov)])?
        }
        _ => return Err(mismatch(kind)),
    };
    Ok((out, effects))
}

pub(super) fn discriminator_step(sup: &mut Supervisor, prepared: &Prepared) -> Result<Option<f64>> {
    if !sup.kind.is_adversarial() {
        return Ok(None);
    }
    let lr = sup.state.lr;
    let kind = sup.kind;
    let Some(opt) = sup.state.disc_opt.as_mut() else {
        return Err(Error::Invalid("discriminator optimizer is not initialised; run init_data_optimizer".into()));
    };
    let mut tape = Tape::new(crate::tensor::Precision::Single);
    match (&mut sup.nets, prepared) {
        (Nets::Context { gen, disc }, Prepared::Context { erased, clean, .. }) => {
            let mut t = Tape::new(tape.precision());
            let x = t.constant(erased)?;
            let y = gen.forward_eval(&mut t, x)?;
            let fake = tape.constant(&t.tensor(y))?;
            let real = tape.constant(clean)?;
            let d_real = disc.forward(&mut tape, real, Mode::Train)?;
            let d_fake = disc.forward(&mut tape, fake, Mode::Train)?;
            let n = tape.value(d_real).len();
            let a = tape.bce_with_logits(d_real, &vec![1.0; n])?;
            let b = tape.bce_with_logits(d_fake, &vec![0.0; n])?;
            let l = tape.add(a, b)?;
            let v = tape.item(l)?;
            tape.backward(l)?;
            opt.step(&mut [disc], &tape, lr)?;
            Ok(Some(v))
        }
        (Nets::BiGan { gen, enc, disc_x, disc_joint }, Prepared::BiGan { real, z }) => {
            let mut t = Tape::new(tape.precision());
            let xr = t.constant(real)?;
            let e = enc.forward_eval(&mut t, xr)?;
            let zt = t.constant(z)?;
            let g = gen.forward_eval(&mut t, zt)?;
            let x = tape.constant(real)?;
            let e = tape.constant(&t.tensor(e))?;
            let g = tape.constant(&t.tensor(g))?;
            let zv = tape.constant(z)?;
            let d_real = bigan_disc(&mut tape, disc_x, disc_joint, x, e)?;
            let d_fake = bigan_disc(&mut tape, disc_x, disc_joint, g, zv)?;
            let n = tape.value(d_real).len();
            let a = tape.bce_with_logits(d_real, &vec![1.0; n])?;
            let b = tape.bce_with_logits(d_fake, &vec![0.0; n])?;
            let l = tape.add(a, b)?;
            let v = tape.item(l)?;
            tape.backward(l)?;
            opt.step(&mut [disc_x, disc_joint], &tape, lr)?;
            Ok(Some(v))
        }
        _ => Err(mismatch(kind)),
    }
}

/// Fraction of `images × 4 rotations` whose rotation the RotateNet head
/// predicts correctly.
pub fn rotation_accuracy(sup: &Supervisor, images: &[Image]) -> Result<f64> {
    let Nets::Classifier(net) = &sup.nets else {
        return invalid("rotation accuracy needs a rotatenet supervisor");
    };
    if sup.kind != TaskKind::RotateNet {
        return invalid("rotation accuracy needs a rotatenet supervisor");
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in images.chunks(32) {
        for k in 0..4 {
            let rotated: Vec<Image> = chunk.iter().map(|img| rotate90(img, k)).collect();
            let mut tape = Tape::new(crate::tensor::Precision::Single);
            let x = tape.constant(&images_to_tensor(&rotated)?)?;
            let logits = net.forward_eval(&mut tape, x)?;
            for row in tape.value(logits).chunks(4) {
                let pred = row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
                correct += usize::from(pred == k as usize);
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}
