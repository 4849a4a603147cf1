use super::{DataInfo, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{
    build_backbone, build_decoder, build_mlp_head, ema_update, BackboneConfig, CombinedNet, DecoderConfig,
    DecoderOutput, FinalActivation, ModuleGraph,
};

/// Task networks. Field names double as checkpoint graph names.
#[derive(Clone, Debug)]
pub(super) enum Nets {
    /// RotateNet, ExemplarNet and Jigsaw: backbone plus logits head.
    Classifier(CombinedNet),
    /// Denoising autoencoder: encoder plus decoder.
    AutoEncoder(CombinedNet),
    Context { gen: CombinedNet, disc: ModuleGraph },
    SplitBrain { l: CombinedNet, ab: CombinedNet },
    BiGan { gen: ModuleGraph, enc: ModuleGraph, disc_x: ModuleGraph, disc_joint: ModuleGraph },
    /// ID: backbone plus projection.
    Embedding(CombinedNet),
    /// CPC: patch encoder with its target projection, context network and
    /// one prediction head per row offset.
    Cpc { net: CombinedNet, context: ModuleGraph, predictors: Vec<ModuleGraph> },
    Moc { online: CombinedNet, target: CombinedNet },
    Cmc { l: CombinedNet, ab: CombinedNet },
    Byol { online: CombinedNet, predictor: ModuleGraph, target: CombinedNet },
    Pirl { net: CombinedNet, jig_head: ModuleGraph },
}

const DISC_INIT_SCALE: f64 = 0.3;

struct Seeds(u64);

impl Seeds {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        self.0
    }
}

fn backbone(base: &BackboneConfig, in_channels: usize, size: usize, feature_dim: usize, seed: u64) -> Result<ModuleGraph> {
    let cfg = BackboneConfig { in_channels, input_size: size, feature_dim, ..base.clone() };
    build_backbone(&cfg, seed)
}

fn linear(d_in: usize, d_out: usize, seed: u64) -> Result<ModuleGraph> {
    build_mlp_head(&[d_in, d_out], FinalActivation::None, seed)
}

/// Decoder with as many stride-2 stages (at most three) as `size` allows.
fn decoder(in_dim: usize, out_channels: usize, size: usize, output: DecoderOutput, seed: u64) -> Result<ModuleGraph> {
    let stages = (size.trailing_zeros() as usize).min(3);
    if stages == 0 {
        return Err(Error::Config(format!("decoders need an even image size, got {size}")));
    }
    let widths = [64, 32, 16][3 - stages..].to_vec();
    build_decoder(&DecoderConfig { in_dim, widths, out_channels, out_size: size, output }, seed)
}

/// Scales the final linear layer so a fresh discriminator starts with
/// logits near 0.
fn shrink_last_linear(g: &mut ModuleGraph, factor: f64) {
    let n = g.entries().len();
    for p in g.entries_mut().into_iter().skip(n.saturating_sub(2)) {
        p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

fn momentum_copy(net: &CombinedNet) -> CombinedNet {
    let mut target = CombinedNet { backbone: net.backbone.duplicate(), predictor: net.predictor.duplicate() };
    target.backbone.set_trainable(false);
    target.predictor.set_trainable(false);
    target
}

impl Nets {
    pub(super) fn build(kind: TaskKind, task: &TaskConfig, info: DataInfo, seed: u64) -> Result<Self> {
        let mut s = Seeds(seed);
        let b = &task.backbone;
        let (c, res, fd, d) = (info.channels, info.resolution, b.feature_dim, task.embed_dim);
        let main = |s: &mut Seeds| backbone(b, c, res, fd, s.next());
        Ok(match kind {
            TaskKind::RotateNet | TaskKind::ExemplarNet | TaskKind::Jigsaw => {
                let classes = match kind {
                    TaskKind::RotateNet => 4,
                    TaskKind::ExemplarNet => info.len,
                    _ => task.permutations,
                };
                let size = match kind {
                    TaskKind::Jigsaw => res / task.jigsaw_grid * task.jigsaw_grid,
                    _ => res,
                };
                if size == 0 {
                    return Err(Error::Config(format!("{res} px images are smaller than the jigsaw grid")));
                }
                let f = backbone(b, c, size, fd, s.next())?;
                Nets::Classifier(CombinedNet::new(f, linear(fd, classes, s.next())?)?)
            }
            TaskKind::Denoise => {
                let f = main(&mut s)?;
                Nets::AutoEncoder(CombinedNet::new(f, decoder(fd, c, res, DecoderOutput::Sigmoid, s.next())?)?)
            }
            TaskKind::Context => {
                let f = main(&mut s)?;
                let gen = CombinedNet::new(f, decoder(fd, c, res, DecoderOutput::Sigmoid, s.next())?)?;
                let small = BackboneConfig { widths: vec![8, 16], ..b.clone() };
                let mut disc = backbone(&small, c, res, 1, s.next())?;
                shrink_last_linear(&mut disc, DISC_INIT_SCALE);
                Nets::Context { gen, disc }
            }
            TaskKind::SplitBrain => {
                let half = BackboneConfig { widths: b.widths.iter().map(|w| (w / 2).max(1)).collect(), ..b.clone() };
                let hd = (fd / 2).max(1);
                let fl = backbone(&half, 1, res, hd, s.next())?;
                let fab = backbone(&half, 2, res, hd, s.next())?;
                let l = CombinedNet::new(fl, decoder(hd, 2, res, DecoderOutput::Linear, s.next())?)?;
                let ab = CombinedNet::new(fab, decoder(hd, 1, res, DecoderOutput::Linear, s.next())?)?;
                Nets::SplitBrain { l, ab }
            }
            TaskKind::BiGan => {
                let z = task.z_dim;
                let gen = decoder(z, c, res, DecoderOutput::TanhUnit, s.next())?;
                let enc = backbone(b, c, res, z, s.next())?;
                let small = BackboneConfig { widths: vec![8, 16], ..b.clone() };
                let disc_x = backbone(&small, c, res, 32, s.next())?;
                let mut disc_joint = build_mlp_head(&[32 + z, 64, 1], FinalActivation::None, s.next())?;
                shrink_last_linear(&mut disc_joint, DISC_INIT_SCALE);
                Nets::BiGan { gen, enc, disc_x, disc_joint }
            }
            TaskKind::Id => {
                let f = main(&mut s)?;
                Nets::Embedding(CombinedNet::new(f, linear(fd, d, s.next())?)?)
            }
            TaskKind::Cpc => {
                let cell = res / task.cpc_grid;
                if cell < 2 {
                    return Err(Error::Config(format!("{res} px images are too small for a {0}x{0} grid", task.cpc_grid)));
                }
                let f = backbone(b, c, cell, fd, s.next())?;
                let net = CombinedNet::new(f, linear(fd, d, s.next())?)?;
                let context = build_mlp_head(&[fd, fd, fd], FinalActivation::None, s.next())?;
                let predictors = (0..task.cpc_offsets).map(|_| linear(fd, d, s.next())).collect::<Result<_>>()?;
                Nets::Cpc { net, context, predictors }
            }
            TaskKind::Moc => {
                let f = main(&mut s)?;
                let online = CombinedNet::new(f, linear(fd, d, s.next())?)?;
                let target = momentum_copy(&online);
                Nets::Moc { online, target }
            }
            TaskKind::Cmc => {
                let fl = backbone(b, 1, res, fd, s.next())?;
                let fab = backbone(b, 2, res, fd, s.next())?;
                let l = CombinedNet::new(fl, linear(fd, d, s.next())?)?;
                let ab = CombinedNet::new(fab, linear(fd, d, s.next())?)?;
                Nets::Cmc { l, ab }
            }
            TaskKind::Byol => {
                let f = main(&mut s)?;
                let g = build_mlp_head(&[fd, fd, d], FinalActivation::None, s.next())?;
                let online = CombinedNet::new(f, g)?;
                let predictor = linear(d, d, s.next())?;
                let target = momentum_copy(&online);
                Nets::Byol { online, predictor, target }
            }
            TaskKind::Pirl => {
                if res < 3 {
                    return Err(Error::Config("pirl needs images of at least 3 px".into()));
                }
                let f = main(&mut s)?;
                let net = CombinedNet::new(f, linear(fd, d, s.next())?)?;
                let jig_head = linear(fd, d, s.next())?;
                Nets::Pirl { net, jig_head }
            }
        })
    }

    pub(super) fn graphs(&self) -> Vec<(String, &ModuleGraph)> {
        let mut out: Vec<(String, &ModuleGraph)> = Vec::new();
        match self {
            Nets::Classifier(n) | Nets::AutoEncoder(n) | Nets::Embedding(n) => {
                out.push(("backbone".into(), &n.backbone));
                out.push(("head".into(), &n.predictor));
            }
            Nets::Context { gen, disc } => {
                out.push(("backbone".into(), &gen.backbone));
                out.push(("head".into(), &gen.predictor));
                out.push(("disc".into(), disc));
            }
            Nets::SplitBrain { l, ab } | Nets::Cmc { l, ab } => {
                out.push(("l_backbone".into(), &l.backbone));
                out.push(("l_head".into(), &l.predictor));
                out.push(("ab_backbone".into(), &ab.backbone));
                out.push(("ab_head".into(), &ab.predictor));
            }
            Nets::BiGan { gen, enc, disc_x, disc_joint } => {
                out.push(("generator".into(), gen));
                out.push(("encoder".into(), enc));
                out.push(("disc_x".into(), disc_x));
                out.push(("disc_joint".into(), disc_joint));
            }
            Nets::Cpc { net, context, predictors } => {
                out.push(("backbone".into(), &net.backbone));
                out.push(("head".into(), &net.predictor));
                out.push(("context".into(), context));
                for (k, p) in predictors.iter().enumerate() {
                    out.push((format!("predictor_{}", k + 1), p));
                }
            }
            Nets::Moc { online, target } => {
                out.push(("backbone".into(), &online.backbone));
                out.push(("head".into(), &online.predictor));
                out.push(("target_backbone".into(), &target.backbone));
                out.push(("target_head".into(), &target.predictor));
            }
            Nets::Byol { online, predictor, target } => {
                out.push(("backbone".into(), &online.backbone));
                out.push(("head".into(), &online.predictor));
                out.push(("predictor".into(), predictor));
                out.push(("target_backbone".into(), &target.backbone));
                out.push(("target_head".into(), &target.predictor));
            }
            Nets::Pirl { net, jig_head } => {
                out.push(("backbone".into(), &net.backbone));
                out.push(("head".into(), &net.predictor));
                out.push(("jig_head".into(), jig_head));
            }
        }
        out
    }

    pub(super) fn graphs_mut(&mut self) -> Vec<(String, &mut ModuleGraph)> {
        let mut out: Vec<(String, &mut ModuleGraph)> = Vec::new();
        match self {
            Nets::Classifier(n) | Nets::AutoEncoder(n) | Nets::Embedding(n) => {
                out.push(("backbone".into(), &mut n.backbone));
                out.push(("head".into(), &mut n.predictor));
            }
            Nets::Context { gen, disc } => {
                out.push(("backbone".into(), &mut gen.backbone));
                out.push(("head".into(), &mut gen.predictor));
                out.push(("disc".into(), disc));
            }
            Nets::SplitBrain { l, ab } | Nets::Cmc { l, ab } => {
                out.push(("l_backbone".into(), &mut l.backbone));
                out.push(("l_head".into(), &mut l.predictor));
                out.push(("ab_backbone".into(), &mut ab.backbone));
                out.push(("ab_head".into(), &mut ab.predictor));
            }
            Nets::BiGan { gen, enc, disc_x, disc_joint } => {
                out.push(("generator".into(), gen));
                out.push(("encoder".into(), enc));
                out.push(("disc_x".into(), disc_x));
                out.push(("disc_joint".into(), disc_joint));
            }
            Nets::Cpc { net, context, predictors } => {
                out.push(("backbone".into(), &mut net.backbone));
                out.push(("head".into(), &mut net.predictor));
                out.push(("context".into(), context));
                for (k, p) in predictors.iter_mut().enumerate() {
                    out.push((format!("predictor_{}", k + 1), p));
                }
            }
            Nets::Moc { online, target } => {
                out.push(("backbone".into(), &mut online.backbone));
                out.push(("head".into(), &mut online.predictor));
                out.push(("target_backbone".into(), &mut target.backbone));
                out.push(("target_head".into(), &mut target.predictor));
            }
            Nets::Byol { online, predictor, target } => {
                out.push(("backbone".into(), &mut online.backbone));
                out.push(("head".into(), &mut online.predictor));
                out.push(("predictor".into(), predictor));
                out.push(("target_backbone".into(), &mut target.backbone));
                out.push(("target_head".into(), &mut target.predictor));
            }
            Nets::Pirl { net, jig_head } => {
                out.push(("backbone".into(), &mut net.backbone));
                out.push(("head".into(), &mut net.predictor));
                out.push(("jig_head".into(), jig_head));
            }
        }
        out
    }

    /// Graphs stepped by the main optimizer: everything except
    /// discriminators and momentum targets.
    pub(super) fn trainable(&mut self) -> Vec<&mut ModuleGraph> {
        self.graphs_mut()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("disc") && !n.starts_with("target_"))
            .map(|(_, g)| g)
            .collect()
    }

    /// EMA of momentum targets after each optimizer step.
    pub(super) fn after_step(&mut self, m: f64) -> Result<()> {
        match self {
            Nets::Moc { online, target } | Nets::Byol { online, target, .. } => {
                ema_update(&mut target.backbone, &online.backbone, m)?;
                ema_update(&mut target.predictor, &online.predictor, m)
            }
            _ => Ok(()),
        }
    }

    pub(super) fn backbone(&self) -> Result<ModuleGraph> {
        Ok(match self {
            Nets::Classifier(n) | Nets::AutoEncoder(n) | Nets::Embedding(n) => n.backbone.clone(),
            Nets::Context { gen, .. } => gen.backbone.clone(),
            Nets::SplitBrain { l, ab } => {
                let mut g = ModuleGraph::new(l.backbone.precision());
                g.parallel(vec![(0..1, l.backbone.clone()), (1..3, ab.backbone.clone())]);
                g.set_feature_dim(l.backbone.feature_dim() + ab.backbone.feature_dim());
                g
            }
            Nets::BiGan { enc, .. } => enc.clone(),
            Nets::Cpc { net, .. } | Nets::Pirl { net, .. } => net.backbone.clone(),
            Nets::Moc { online, .. } | Nets::Byol { online, .. } => online.backbone.clone(),
            Nets::Cmc { l, .. } => l.backbone.clone(),
        })
    }
}
