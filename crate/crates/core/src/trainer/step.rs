use rayon::prelude::*;

use super::batch::{compose_batch, DataStream, Minibatch};
use super::config::{TeacherUpdate, TrainConfig};
use crate::align::{
    dann_loss, substitute_translated, GradReverse, ImageDiscriminator, InstanceDiscriminator, TranslatedPair,
    TranslationDirection,
};
use crate::augment::{apply_pipeline, paired_views, TransformPipeline};
use crate::datamodel::{DetectionDataset, Domain, ImageRecord};
use crate::detector::{
    generate_anchors, BackboneOut, Detector, HeadGrads, LossInputs, SupervisedLosses,
};
use crate::distill::{
    build_soft_targets, ema_update, hard_distill_losses, hard_pseudo_labels, sample_distill_anchors,
    soft_distill_losses, DistillMode, SoftDistillLosses, TeacherView,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::derive_seed;

/// Log names of hard-distillation terms, in supervised-loss order.
pub const HARD_DISTILL_NAMES: [&str; 4] = ["distill_rpn_obj", "distill_rpn_reg", "distill_roi_cls", "distill_roi_reg"];
pub const ALIGN_IMAGE_NAME: &str = "align_img";
pub const ALIGN_INSTANCE_NAME: &str = "align_ins";

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: Option<ParamSet>,
    pub velocity: ParamSet,
    pub disc_img: Option<ParamSet>,
    pub disc_img_velocity: Option<ParamSet>,
    pub disc_ins: Option<ParamSet>,
    pub disc_ins_velocity: Option<ParamSet>,
    /// Number of completed steps.
    pub iteration: usize,
}

impl TrainState {
    /// The model reported by evaluation: the teacher when it evolves, else the student.
    pub fn kept(&self, config: &TrainConfig) -> &ParamSet {
        match &self.teacher {
            Some(t) if config.teacher_evolves() => t,
            _ => &self.student,
        }
    }
}

/// Named loss values of one step, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub iteration: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub losses: LossBundle,
}

#[derive(Default)]
struct ImageOut {
    grads: Option<ParamSet>,
    disc_img: Option<ParamSet>,
    disc_ins: Option<ParamSet>,
    sup: Option<[f64; 4]>,
    distill: Option<[f64; 4]>,
    align_img: Option<f64>,
    align_ins: Option<f64>,
}

#[derive(Clone, Copy)]
enum Role {
    Source { alt: bool },
    TargetSupervised,
    TargetUnlabeled,
}

/// Training step machinery over fixed source and target datasets.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    source: &'a DetectionDataset,
    target: &'a DetectionDataset,
    translated: Option<&'a TranslatedPair>,
    source_pipeline: TransformPipeline,
    source_alt: Option<TransformPipeline>,
    target_pipeline: TransformPipeline,
    weak_pipeline: TransformPipeline,
    image_disc: Option<ImageDiscriminator>,
    instance_disc: Option<InstanceDiscriminator>,
    source_stream: DataStream,
    target_stream: DataStream,
}

impl<'a> Trainer<'a> {
    /// `target` is the unlabeled target split, or the labeled one when
    /// `config.target_supervised` is set.
    pub fn new(
        config: &'a TrainConfig,
        source: &'a DetectionDataset,
        target: &'a DetectionDataset,
        translated: Option<&'a TranslatedPair>,
    ) -> Result<Self> {
        config.validate()?;
        if config.align.img2img && translated.is_none() {
            return Err(Error::Config("align.img2img needs a directory of translated images".into()));
        }
        if config.target_supervised && !target.labeled {
            return Err(Error::Config("supervised target training needs a labeled target split".into()));
        }
        let sf = source.mean_pixel();
        let tf = target.mean_pixel();
        let p = &config.pipelines;
        let a = &config.align;
        let c = config.detector.feature_channels();
        Ok(Self {
            config,
            source,
            target,
            translated,
            source_pipeline: p.source.clone().with_fill(sf),
            source_alt: p.source_alt.clone().map(|q| q.with_fill(sf)),
            target_pipeline: p.target.clone().with_fill(tf),
            weak_pipeline: p.weak.clone().with_fill(tf),
            image_disc: a.image_level.then(|| ImageDiscriminator {
                channels: c,
                hidden: a.image_disc_channels,
            }),
            instance_disc: a.instance_level.then(|| InstanceDiscriminator {
                width: config.detector.roi_hidden,
                hidden: a.instance_disc_hidden,
            }),
            source_stream: DataStream::new(source.len(), derive_seed(config.seed, &[0x5EED, 0])),
            target_stream: DataStream::new(target.len(), derive_seed(config.seed, &[0x5EED, 1])),
        })
    }

    /// Fresh state from student and teacher initializations.
    pub fn init_state(&self, student: ParamSet, teacher: Option<ParamSet>) -> Result<TrainState> {
        let teacher = if self.config.has_teacher() {
            let t = teacher.unwrap_or_else(|| student.clone());
            student.check_compatible(&t)?;
            Some(t)
        } else {
            None
        };
        let disc_img = self.image_disc.as_ref().map(|d| d.init(derive_seed(self.config.seed, &[0xD15C, 0])));
        let disc_ins = self.instance_disc.as_ref().map(|d| d.init(derive_seed(self.config.seed, &[0xD15C, 1])));
        Ok(TrainState {
            velocity: student.zeros_like(),
            student,
            teacher,
            disc_img_velocity: disc_img.as_ref().map(ParamSet::zeros_like),
            disc_img,
            disc_ins_velocity: disc_ins.as_ref().map(ParamSet::zeros_like),
            disc_ins,
            iteration: 0,
        })
    }

    pub fn minibatch(&self, iteration: usize) -> Result<Minibatch> {
        compose_batch(
            &self.source_stream,
            &self.target_stream,
            self.config.total_batch,
            self.config.target_fraction,
            iteration,
        )
    }

    /// One full step: gradient update, then teacher update.
    pub fn step(&self, state: &mut TrainState) -> Result<StepOutput> {
        let out = self.gradient_step(state)?;
        self.update_teacher(state)?;
        state.iteration += 1;
        Ok(out)
    }

    /// Computes all enabled objectives on the batch for `state.iteration`
    /// and applies one optimizer step to the student and discriminators.
    /// The teacher is left untouched.
    pub fn gradient_step(&self, state: &mut TrainState) -> Result<StepOutput> {
        let it = state.iteration;
        let batch = self.minibatch(it)?;
        let cfg = self.config;
        let n_src = batch.source.len();
        let n_tgt = batch.target.len();
        let half = n_src / 2;
        let mut jobs: Vec<(Role, &ImageRecord, u64)> = Vec::with_capacity(n_src + n_tgt);
        for (slot, &i) in batch.source.iter().enumerate() {
            let alt = self.source_alt.is_some() && slot >= half;
            jobs.push((Role::Source { alt }, &self.source.records[i], derive_seed(cfg.seed, &[0x1AB, it as u64, 0, slot as u64])));
        }
        let target_role = if cfg.target_supervised {
            Role::TargetSupervised
        } else {
            Role::TargetUnlabeled
        };
        for (slot, &i) in batch.target.iter().enumerate() {
            jobs.push((target_role, &self.target.records[i], derive_seed(cfg.seed, &[0x1AB, it as u64, 1, slot as u64])));
        }
        let n_sup = n_src + if cfg.target_supervised { n_tgt } else { 0 };
        let scales = Scales {
            sup: 1.0 / n_sup.max(1) as f64,
            distill: 1.0 / n_tgt.max(1) as f64,
            batch: 1.0 / (n_src + n_tgt) as f64,
            lambda: cfg.align.adv_weight_at(it, cfg.iterations),
        };
        let results: Vec<Result<ImageOut>> = jobs
            .par_iter()
            .map(|&(role, rec, seed)| self.image_work(state, role, rec, seed, &scales))
            .collect();

        let mut grads = state.student.zeros_like();
        let mut disc_img = state.disc_img.as_ref().map(ParamSet::zeros_like);
        let mut disc_ins = state.disc_ins.as_ref().map(ParamSet::zeros_like);
        let mut sup = [0.0; 4];
        let mut distill = [0.0; 4];
        let (mut any_sup, mut any_distill) = (false, false);
        let (mut align_img, mut align_ins) = (0.0, 0.0);
        for r in results {
            let r = r.map_err(|e| match e {
                Error::NonFinite(name) => Error::NonFiniteLoss {
                    iteration: it,
                    terms: format!("activations of `{name}`"),
                },
                e => e,
            })?;
            if let Some(g) = &r.grads {
                grads.axpy(1.0, g)?;
            }
            if let (Some(acc), Some(g)) = (disc_img.as_mut(), &r.disc_img) {
                acc.axpy(1.0, g)?;
            }
            if let (Some(acc), Some(g)) = (disc_ins.as_mut(), &r.disc_ins) {
                acc.axpy(1.0, g)?;
            }
            if let Some(v) = r.sup {
                any_sup = true;
                sup.iter_mut().zip(v).for_each(|(a, b)| *a += b * scales.sup);
            }
            if let Some(v) = r.distill {
                any_distill = true;
                distill.iter_mut().zip(v).for_each(|(a, b)| *a += b * scales.distill);
            }
            align_img += r.align_img.unwrap_or(0.0);
            align_ins += r.align_ins.unwrap_or(0.0);
        }

        let mut losses = LossBundle::default();
        if any_sup {
            for (n, v) in SupervisedLosses::NAMES.iter().zip(sup) {
                losses.terms.push((n.to_string(), v));
            }
            losses.total += sup.iter().sum::<f64>();
        }
        if let (true, Some(d)) = (any_distill, &cfg.distill) {
            let (names, weights) = match d.mode {
                DistillMode::Soft => (SoftDistillLosses::NAMES, d.lambdas),
                DistillMode::Hard => (HARD_DISTILL_NAMES, hard_weights(d.lambdas)),
            };
            for (n, v) in names.iter().zip(distill) {
                losses.terms.push((n.to_string(), v));
            }
            losses.total += distill.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>();
        }
        if self.image_disc.is_some() {
            losses.terms.push((ALIGN_IMAGE_NAME.into(), align_img));
            losses.total += align_img;
        }
        if self.instance_disc.is_some() {
            losses.terms.push((ALIGN_INSTANCE_NAME.into(), align_ins));
            losses.total += align_ins;
        }
        if !losses.total.is_finite() {
            let terms = losses.terms.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
            return Err(Error::NonFiniteLoss { iteration: it, terms });
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                terms: format!("gradient of `{name}`"),
            });
        }

        if cfg.grad_clip > 0.0 {
            let norm = grads.l2_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
        }
        sgd(&mut state.student, &mut state.velocity, &grads, cfg.learning_rate, cfg.momentum)?;
        let dlr = cfg.learning_rate * cfg.align.disc_lr_scale;
        if let (Some(p), Some(v), Some(g)) = (state.disc_img.as_mut(), state.disc_img_velocity.as_mut(), &disc_img) {
            sgd(p, v, g, dlr, cfg.momentum)?;
        }
        if let (Some(p), Some(v), Some(g)) = (state.disc_ins.as_mut(), state.disc_ins_velocity.as_mut(), &disc_ins) {
            sgd(p, v, g, dlr, cfg.momentum)?;
        }
        Ok(StepOutput {
            iteration: it,
            n_source: n_src,
            n_target: n_tgt,
            losses,
        })
    }

    /// Teacher update after a gradient step.
    pub fn update_teacher(&self, state: &mut TrainState) -> Result<()> {
        let cfg = self.config;
        let Some(teacher) = state.teacher.as_mut() else {
            return Ok(());
        };
        let rule = if cfg.distill.is_some() {
            cfg.teacher_update
        } else {
            TeacherUpdate::Ema
        };
        match rule {
            TeacherUpdate::None => {}
            TeacherUpdate::StudentIsTeacher => *teacher = state.student.clone(),
            TeacherUpdate::Ema => *teacher = ema_update(teacher, &state.student, cfg.ema.alpha)?,
        }
        Ok(())
    }

    fn image_work(&self, state: &TrainState, role: Role, rec: &ImageRecord, seed: u64, s: &Scales) -> Result<ImageOut> {
        match role {
            Role::Source { alt } => {
                let mut rec = rec.clone();
                if self.config.align.img2img {
                    let pair = self.translated.expect("checked in new");
                    rec = substitute_translated(&[rec], pair, TranslationDirection::SrcToTgtlike)?.remove(0);
                }
                let pl = if alt {
                    self.source_alt.as_ref().expect("alt pipeline present")
                } else {
                    &self.source_pipeline
                };
                let (aug, _) = apply_pipeline(&rec, pl, seed)?;
                self.supervised_image(state, &aug, Domain::Source, seed, s)
            }
            Role::TargetSupervised => {
                let (aug, _) = apply_pipeline(rec, &self.target_pipeline, seed)?;
                self.supervised_image(state, &aug, Domain::Target, seed, s)
            }
            Role::TargetUnlabeled => self.target_image(state, rec, seed, s),
        }
    }

    fn supervised_image(&self, state: &TrainState, rec: &ImageRecord, domain: Domain, seed: u64, s: &Scales) -> Result<ImageOut> {
        let dc = &self.config.detector;
        let det = Detector::new(dc, &state.student)?;
        let gts = rec.annotations_or_empty();
        let pass = det.supervised_pass(&rec.pixels, gts, derive_seed(seed, &[7]))?;
        let mut hg = pass.zero_grads(dc);
        let l = pass.losses(gts, dc, [s.sup; 4], &mut hg);
        let mut out = ImageOut {
            sup: Some(l.values()),
            ..Default::default()
        };
        self.align(state, &pass.backbone, &pass.roi.hidden, domain, s, &mut hg, &mut out)?;
        let mut grads = state.student.zeros_like();
        det.backward(&pass.backbone, &pass.rpn, &pass.roi, &hg, &mut grads);
        out.grads = Some(grads);
        Ok(out)
    }

    fn target_image(&self, state: &TrainState, rec: &ImageRecord, seed: u64, s: &Scales) -> Result<ImageOut> {
        let cfg = self.config;
        let dc = &cfg.detector;
        let (mut weak, strong) = paired_views(rec, &self.weak_pipeline, &self.target_pipeline, seed)?;
        if cfg.align.img2img {
            let pair = self.translated.expect("checked in new");
            let translated = substitute_translated(std::slice::from_ref(rec), pair, TranslationDirection::TgtToSrclike)?;
            weak = paired_views(&translated[0], &self.weak_pipeline, &self.target_pipeline, seed)?.0;
        }
        let det = Detector::new(dc, &state.student)?;
        let mut out = ImageOut::default();
        let mut grads = state.student.zeros_like();
        let (h, w) = (strong.pixels.height, strong.pixels.width);
        let k1 = dc.num_classes + 1;

        let Some(dcfg) = &cfg.distill else {
            if self.image_disc.is_none() && self.instance_disc.is_none() {
                return Ok(out);
            }
            let bb = det.backbone(&strong.pixels)?;
            let rpn = det.rpn(&bb)?;
            let anchors = generate_anchors(dc, h, w)?;
            let props = det.proposals(&rpn.outputs, &anchors, h, w, dc.train_proposals);
            let roi = det.roi(&bb, &props)?;
            let mut hg = HeadGrads::default();
            self.align(state, &bb, &roi.hidden, Domain::Target, s, &mut hg, &mut out)?;
            det.backward(&bb, &rpn, &roi, &hg, &mut grads);
            out.grads = Some(grads);
            return Ok(out);
        };
        let teacher = state
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Config("distillation needs a teacher".into()))?;
        let tdet = Detector::new(dc, teacher)?;
        match dcfg.mode {
            DistillMode::Soft => {
                let bb = det.backbone(&strong.pixels)?;
                let rpn = det.rpn(&bb)?;
                let anchors = generate_anchors(dc, h, w)?;
                let view = TeacherView::new(&tdet, &weak.pixels)?;
                let probs = view.objectness_probs(dcfg.temperature_obj);
                let idx = sample_distill_anchors(&probs, dcfg.objectness_gate, dc, derive_seed(seed, &[8]));
                let props = det.proposals(&rpn.outputs, &anchors, h, w, dc.train_proposals);
                let targets = build_soft_targets(&tdet, &view, &idx, anchors.len(), &props, dcfg)?;
                let roi = det.roi(&bb, &props)?;
                let mut hg = HeadGrads::zeros(anchors.len(), props.len(), k1);
                let l = soft_distill_losses(&rpn.outputs, &roi.outputs, &targets, dcfg, dc, s.distill, &mut hg)?;
                out.distill = Some(l.values());
                self.align(state, &bb, &roi.hidden, Domain::Target, s, &mut hg, &mut out)?;
                det.backward(&bb, &rpn, &roi, &hg, &mut grads);
            }
            DistillMode::Hard => {
                let pseudo = hard_pseudo_labels(&tdet.predict(&weak.pixels)?, dcfg.confidence_threshold, dcfg.nms_iou);
                let pass = det.supervised_pass(&strong.pixels, &pseudo, derive_seed(seed, &[9]))?;
                let mut hg = pass.zero_grads(dc);
                let inputs = LossInputs {
                    rpn: &pass.rpn.outputs,
                    anchors: &pass.anchors.boxes,
                    rpn_match: &pass.rpn_match,
                    roi: &pass.roi.outputs,
                    roi_boxes: &pass.roi_boxes,
                    roi_match: &pass.roi_match,
                };
                let weights = hard_weights(dcfg.lambdas).map(|w| w * s.distill);
                let l = hard_distill_losses(&inputs, &pseudo, dc, weights, &mut hg);
                out.distill = Some(l.values());
                self.align(state, &pass.backbone, &pass.roi.hidden, Domain::Target, s, &mut hg, &mut out)?;
                det.backward(&pass.backbone, &pass.rpn, &pass.roi, &hg, &mut grads);
            }
        }
        out.grads = Some(grads);
        Ok(out)
    }

    /// Discriminator losses for one image; reversed feature gradients go into `hg`.
    #[allow(clippy::too_many_arguments)]
    fn align(
        &self,
        state: &TrainState,
        bb: &BackboneOut,
        roi_hidden: &[Vec<f64>],
        domain: Domain,
        s: &Scales,
        hg: &mut HeadGrads,
        out: &mut ImageOut,
    ) -> Result<()> {
        let y = domain.label();
        let reverse = GradReverse { lambda: s.lambda };
        if let (Some(d), Some(p)) = (&self.image_disc, &state.disc_img) {
            let (fh, fw) = bb.feature_hw();
            let feats = reverse.forward(bb.features());
            let pass = d.forward(p, feats, fh, fw)?;
            let (l, g) = dann_loss(&[pass.logit], &[y])?;
            let mut dg = p.zeros_like();
            let d_feat = d.backward(p, feats, &pass, g[0] * s.batch, &mut dg);
            hg.features = reverse.backward(&d_feat);
            out.align_img = Some(l * s.batch);
            out.disc_img = Some(dg);
        }
        if let (Some(d), Some(p)) = (&self.instance_disc, &state.disc_ins) {
            let rows = roi_hidden;
            let (logits, hidden) = d.forward(p, rows)?;
            let (l, g) = dann_loss(&logits, &vec![y; logits.len()])?;
            let mut dg = p.zeros_like();
            let g: Vec<f64> = g.iter().map(|v| v * s.batch).collect();
            let d_rows = d.backward(p, rows, &hidden, &g, &mut dg);
            hg.roi_hidden = d_rows.iter().map(|r| reverse.backward(r)).collect();
            out.align_ins = Some(l * s.batch);
            out.disc_ins = Some(dg);
        }
        Ok(())
    }
}

struct Scales {
    sup: f64,
    distill: f64,
    batch: f64,
    lambda: f64,
}

/// Distillation weights `[rpn_reg, obj, roi_reg, cls]` in supervised-loss order.
pub(crate) fn hard_weights(l: [f64; 4]) -> [f64; 4] {
    [l[1], l[0], l[3], l[2]]
}

fn sgd(params: &mut ParamSet, velocity: &mut ParamSet, grads: &ParamSet, lr: f64, momentum: f64) -> Result<()> {
    velocity.scale(momentum);
    velocity.axpy(1.0, grads)?;
    params.axpy(-lr, velocity)
}
