//! Alternating optimization: the variational distribution, then the student,
//! then (online) the teacher, every iteration.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vemkd_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointWriter};
use crate::config::{MaskSource, RunConfig};
use crate::datagen::{BatchOrder, Dataset, Split};
use crate::distill_losses::{algorithm_loss, Adapters, Algorithm, DistillInputs};
use crate::energy_model::{EnergyFunction, EnergyModel};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::metrics::{evaluate, MetricsReport, ToyEmbedder};
use crate::nets::{Discriminator, Generator};
use crate::sampler::{run_chain, InitSource, InitStrategy, PersistentBuffer};
use crate::vem_objective::{
    combined_student_loss, ebm_loss, student_mi_surrogate, vid_nll, GaussianVariationalHead, TargetSource, Variational,
};

pub const TRAIN_CSV: &str = "train.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Independent seeds for each component, derived from the run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod tag {
    pub const TEACHER: u64 = 1;
    pub const STUDENT: u64 = 2;
    pub const DISC: u64 = 3;
    pub const EBM: u64 = 4;
    pub const VID: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const DATA: u64 = 7;
    pub const PRETRAIN_DATA: u64 = 8;
    pub const ADAPTERS: u64 = 9;
    pub const BUFFER: u64 = 10;
}

/// One CSV row. Columns follow the field order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationLog {
    pub iter: usize,
    pub lr_student: f64,
    pub lr_teacher: f64,
    pub lr_ebm: f64,
    pub lambda_mi: f64,
    pub loss_student: Option<f64>,
    pub loss_algo: Option<f64>,
    pub loss_adv: Option<f64>,
    pub mi_surrogate: Option<f64>,
    pub loss_ebm: Option<f64>,
    pub energy_pos: Option<f64>,
    pub energy_neg: Option<f64>,
    pub ebm_reg: Option<f64>,
    pub chain_energy_first: Option<f64>,
    pub chain_energy_last: Option<f64>,
    pub loss_teacher_g: Option<f64>,
    pub loss_teacher_d: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, Serialize)]
struct EvalRow {
    iter: usize,
    toy_fid: f64,
    ssim_to_target: f64,
    l1_to_target: f64,
    psnr: f64,
    params: usize,
    macs: usize,
    compression_ratio: Option<f64>,
    sampler_invocations: u64,
}

/// A training batch with the (frozen) teacher's outputs.
pub struct Batch {
    pub x: ImageBatch<f32>,
    pub y: ImageBatch<f32>,
    pub teacher_out: ImageBatch<f32>,
}

/// Everything needed to continue a run.
pub struct TrainState {
    pub iteration: usize,
    pub config: RunConfig,
    pub teacher: Generator<f32>,
    pub teacher_disc: Discriminator<f32>,
    pub student: Generator<f32>,
    pub adapters: Adapters<f32>,
    pub ebm: Option<EnergyModel<f32>>,
    pub vid: Option<GaussianVariationalHead<f32>>,
    pub buffer: Option<PersistentBuffer<f32>>,
    pub embedder: ToyEmbedder<f32>,
    opt_teacher: Adam<f32>,
    opt_disc: Adam<f32>,
    opt_student: Adam<f32>,
    opt_adapters: Adam<f32>,
    opt_ebm: Adam<f32>,
    sampler_rng: ChaCha8Rng,
    order: BatchOrder,
    cached_negatives: Option<(usize, ImageBatch<f32>)>,
    pub nonfinite_streak: usize,
}

fn finite_grads(grads: &[Option<Tensor<f32>>]) -> bool {
    grads.iter().flatten().all(Tensor::all_finite)
}

fn lsgan(g: &Graph<f32>, logits: Var, target: f32) -> Var {
    g.mean(g.square(g.add_scalar(logits, -target)))
}

/// Binary mask of input edges dilated by one pixel, `[N, 1, H, W]`.
fn edge_mask(x: &ImageBatch<f32>) -> Tensor<f32> {
    let [n, c, s, _] = x.shape();
    let d = x.data();
    Tensor::from_fn(&[n, 1, s, s], |idx| {
        let j = (idx % s) as isize;
        let i = ((idx / s) % s) as isize;
        let b = idx / (s * s);
        for di in -1..=1isize {
            for dj in -1..=1isize {
                let (ii, jj) = (i + di, j + dj);
                if ii < 0 || jj < 0 || ii >= s as isize || jj >= s as isize {
                    continue;
                }
                if (0..c).any(|ch| d[((b * c + ch) * s + ii as usize) * s + jj as usize] > 0.0) {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

impl TrainState {
    /// Fresh state. Offline modes still need [`TrainState::prepare_teacher`].
    pub fn new(config: &RunConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if config.distill.algorithm == Algorithm::Gcc && config.model.disc_taps.is_empty() {
            return Err(Error::config(
                "model.disc_taps",
                "gcc needs at least one discriminator tap",
            ));
        }
        let seed = config.seed;
        let teacher = Generator::build(&config.model.teacher_spec(), derive_seed(seed, tag::TEACHER))?;
        let student = Generator::build(&config.model.student_spec(), derive_seed(seed, tag::STUDENT))?;
        let teacher_disc = Discriminator::build(&config.model.discriminator_spec(), derive_seed(seed, tag::DISC))?;
        let taps = &config.distill.taps;
        let adapters = Adapters::build(
            &student.tap_channels(taps)?,
            &teacher.tap_channels(taps)?,
            derive_seed(seed ^ config.distill.adapter_seed, tag::ADAPTERS),
        )?;
        let active = config.vem.active();
        let ebm = (active && config.vem.variational == Variational::Ebm)
            .then(|| EnergyModel::build(&config.ebm, derive_seed(seed, tag::EBM)))
            .transpose()?;
        let vid = (active && config.vem.variational == Variational::VidGaussian).then(|| {
            GaussianVariationalHead::build(
                config.model.channels,
                config.vem.vid_hidden,
                derive_seed(seed, tag::VID),
            )
        });
        let buffer = (ebm.is_some() && config.sampler.init == InitStrategy::PersistentBuffer).then(|| {
            let s = config.model.image_size;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::BUFFER));
            PersistentBuffer::uniform(
                config.sampler.buffer_capacity,
                [config.model.channels, s, s],
                config.sampler.reinit_prob,
                &mut rng,
            )
        });
        let adam = || Adam::new(AdamConfig::default());
        Ok(Self {
            iteration: 0,
            config: config.clone(),
            teacher,
            teacher_disc,
            student,
            adapters,
            ebm,
            vid,
            buffer,
            embedder: ToyEmbedder::new(config.model.channels),
            opt_teacher: adam(),
            opt_disc: adam(),
            opt_student: adam(),
            opt_adapters: adam(),
            opt_ebm: adam(),
            sampler_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, tag::SAMPLER)),
            order: BatchOrder::new(
                train_len,
                config.schedule.batch_size,
                derive_seed(seed, tag::DATA),
                true,
            )?,
            cached_negatives: None,
            nonfinite_streak: 0,
        })
    }

    pub fn lambda_mi(&self) -> f64 {
        if self.config.vem.active() {
            self.config.vem.lambda_mi
        } else {
            0.0
        }
    }

    fn lrs(&self) -> (f64, f64, f64) {
        let s = &self.config.schedule;
        let i = self.iteration;
        (
            s.decayed(s.lr_student, i),
            s.decayed(s.lr_teacher, i),
            s.decayed(s.lr_ebm, i),
        )
    }

    /// The batch of the current iteration.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Batch> {
        let idx = self.order.indices(self.iteration);
        let (x, y) = data.gather(Split::Train, &idx)?;
        let teacher_out = self.teacher.generate(&x)?;
        Ok(Batch { x, y, teacher_out })
    }

    fn mi_target<'a>(&self, b: &'a Batch) -> &'a ImageBatch<f32> {
        match self.config.vem.target_source {
            TargetSource::Auto if self.config.schedule.mode.paired() => &b.y,
            TargetSource::RealOutput => &b.y,
            _ => &b.teacher_out,
        }
    }

    /// Updates the variational distribution with the generators frozen.
    /// Returns `false` when the update was skipped as non-finite.
    pub fn step_ebm(&mut self, b: &Batch, log: &mut IterationLog) -> Result<bool> {
        if !self.config.vem.active() {
            return Ok(true);
        }
        let (_, _, lr) = self.lrs();
        let s_out = self.student.generate(&b.x)?;
        let target = self.mi_target(b).clone();
        if let Some(head) = &mut self.vid {
            let g = Graph::new();
            let nll = vid_nll(
                &g,
                head,
                g.constant(target.into_tensor()),
                g.constant(s_out.into_tensor()),
            )?;
            let value = g.item(nll) as f64;
            log.loss_ebm = Some(value);
            let grads = g.backward(nll).for_store(head.store());
            if !value.is_finite() || !finite_grads(&grads) {
                return Ok(false);
            }
            self.opt_ebm.step(head.store_mut(), &grads, lr);
            return Ok(true);
        }
        let ebm = self
            .ebm
            .as_mut()
            .ok_or_else(|| Error::Sequencing("energy model missing".into()))?;
        let init = match self.config.sampler.init {
            InitStrategy::StudentOutput => InitSource::Student,
            InitStrategy::TeacherData => InitSource::Teacher(&target),
            InitStrategy::PersistentBuffer => InitSource::Buffer(
                self.buffer
                    .as_mut()
                    .ok_or_else(|| Error::Sequencing("buffer missing".into()))?,
            ),
            InitStrategy::Uniform => InitSource::Uniform,
        };
        let chain = run_chain(&s_out, &*ebm, &self.config.sampler, init, &mut self.sampler_rng)?;
        log.chain_energy_first = chain.energies.first().copied();
        log.chain_energy_last = chain.energies.last().copied();
        ebm.begin_training_pass();
        let v = ebm_loss(&*ebm, &target, &s_out, &chain.final_samples, self.config.vem.alpha_reg)?;
        log.loss_ebm = Some(v.loss);
        log.energy_pos = Some(v.pos_energy);
        log.energy_neg = Some(v.neg_energy);
        log.ebm_reg = Some(v.regularizer);
        if !v.loss.is_finite() || !finite_grads(&v.grads) {
            return Ok(false);
        }
        self.opt_ebm.step(ebm.store_mut(), &v.grads, lr);
        self.cached_negatives = Some((self.iteration, chain.final_samples));
        Ok(true)
    }

    /// Updates the student and its adapters with everything else frozen.
    pub fn step_student(&mut self, b: &Batch, log: &mut IterationLog) -> Result<bool> {
        let cfg = &self.config;
        let (lr, _, _) = self.lrs();
        let negatives = if cfg.vem.active() && cfg.vem.variational == Variational::Ebm {
            match self.cached_negatives.take() {
                Some((it, t)) if it == self.iteration => Some(t),
                _ => return Err(Error::Sequencing("step_student needs negatives from step_ebm".into())),
            }
        } else {
            None
        };
        let g = Graph::new();
        g.freeze(self.teacher.store());
        g.freeze(self.teacher_disc.store());
        let x = g.constant(b.x.tensor().clone());
        let sf = self.student.forward(&g, x)?;
        let tf = self.teacher.forward(&g, x)?;
        let s_feats = sf.select(&cfg.distill.taps)?;
        let t_feats = tf.select(&cfg.distill.taps)?;
        let target = g.constant(b.y.tensor().clone());
        let disc_s;
        let disc_t;
        let disc_feats = if cfg.distill.algorithm == Algorithm::Gcc {
            disc_s = self.teacher_disc.forward(&g, x, sf.output)?.taps;
            disc_t = self.teacher_disc.forward(&g, x, tf.output)?.taps;
            Some((&disc_s[..], &disc_t[..]))
        } else {
            None
        };
        let mask = match (cfg.distill.algorithm, cfg.schedule.mask_source) {
            (Algorithm::Cagc, MaskSource::Edges) => Some(edge_mask(&b.x)),
            (Algorithm::Cagc, MaskSource::Ones) => Some(Tensor::ones(&[b.x.batch(), 1, b.x.size(), b.x.size()])),
            _ => None,
        };
        let inputs = DistillInputs {
            student_out: sf.output,
            teacher_out: tf.output,
            student_feats: &s_feats,
            teacher_feats: &t_feats,
            target: Some(target),
            disc_feats,
            mask: mask.as_ref(),
        };
        let paired = cfg.schedule.mode.paired();
        let mut l_algo = algorithm_loss(&g, &inputs, &cfg.distill, &self.adapters, &self.embedder, paired)?;
        log.loss_algo = Some(g.item(l_algo) as f64);
        if cfg.distill.algorithm.adversarial() && cfg.schedule.lambda_gan > 0.0 {
            let d = self.teacher_disc.forward(&g, x, sf.output)?.logits;
            let adv = lsgan(&g, d, 1.0);
            log.loss_adv = Some(g.item(adv) as f64);
            l_algo = g.add(l_algo, g.scale(adv, cfg.schedule.lambda_gan as f32));
        }
        let mi_target = g.constant(self.mi_target(b).tensor().clone());
        let surrogate = if let Some(neg) = negatives {
            let ebm = self
                .ebm
                .as_ref()
                .ok_or_else(|| Error::Sequencing("energy model missing".into()))?;
            Some(student_mi_surrogate(
                &g,
                ebm,
                mi_target,
                sf.output,
                g.constant(neg.into_tensor()),
            )?)
        } else if let (Some(head), true) = (&self.vid, cfg.vem.active()) {
            g.freeze(head.store());
            Some(vid_nll(&g, head, mi_target, sf.output)?)
        } else {
            None
        };
        log.mi_surrogate = surrogate.map(|s| g.item(s) as f64);
        let loss = combined_student_loss(&g, l_algo, surrogate, self.lambda_mi());
        let value = g.item(loss) as f64;
        log.loss_student = Some(value);
        let grads = g.backward(loss);
        let gs = grads.for_store(self.student.store());
        let ga = grads.for_store(self.adapters.store());
        if !value.is_finite() || !finite_grads(&gs) || !finite_grads(&ga) {
            return Ok(false);
        }
        self.opt_student.step(self.student.store_mut(), &gs, lr);
        self.opt_adapters.step(self.adapters.store_mut(), &ga, lr);
        Ok(true)
    }

    /// One discriminator and one generator update of the teacher.
    pub fn step_teacher(&mut self, b: &Batch, log: &mut IterationLog) -> Result<bool> {
        if !self.config.schedule.mode.online() {
            return Err(Error::Mode {
                op: "step_teacher",
                mode: format!("{:?}", self.config.schedule.mode),
            });
        }
        let (_, lr, _) = self.lrs();
        self.teacher_update(&b.x, &b.y, lr, log)
    }

    fn teacher_update(
        &mut self,
        x: &ImageBatch<f32>,
        y: &ImageBatch<f32>,
        lr: f64,
        log: &mut IterationLog,
    ) -> Result<bool> {
        let sched = &self.config.schedule;
        let fake = self.teacher.generate(x)?;
        let g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let real = self
            .teacher_disc
            .forward(&g, xv, g.constant(y.tensor().clone()))?
            .logits;
        let fk = self
            .teacher_disc
            .forward(&g, xv, g.constant(fake.into_tensor()))?
            .logits;
        let d_loss = g.scale(g.add(lsgan(&g, real, 1.0), lsgan(&g, fk, 0.0)), 0.5);
        let d_value = g.item(d_loss) as f64;
        log.loss_teacher_d = Some(d_value);
        let gd = g.backward(d_loss).for_store(self.teacher_disc.store());
        if !d_value.is_finite() || !finite_grads(&gd) {
            return Ok(false);
        }
        self.opt_disc.step(self.teacher_disc.store_mut(), &gd, lr);

        let g = Graph::new();
        g.freeze(self.teacher_disc.store());
        let xv = g.constant(x.tensor().clone());
        let out = self.teacher.forward(&g, xv)?.output;
        let d = self.teacher_disc.forward(&g, xv, out)?.logits;
        let mut loss = g.scale(lsgan(&g, d, 1.0), sched.lambda_gan as f32);
        if sched.teacher_recon && sched.lambda_rec > 0.0 {
            let l1 = g.mean(g.abs(g.sub(out, g.constant(y.tensor().clone()))));
            loss = g.add(loss, g.scale(l1, sched.lambda_rec as f32));
        }
        let value = g.item(loss) as f64;
        log.loss_teacher_g = Some(value);
        let gt = g.backward(loss).for_store(self.teacher.store());
        if !value.is_finite() || !finite_grads(&gt) {
            return Ok(false);
        }
        self.opt_teacher.step(self.teacher.store_mut(), &gt, lr);
        Ok(true)
    }

    /// For offline modes: loads the configured teacher checkpoint, or
    /// pretrains the teacher on the training split.
    pub fn prepare_teacher(&mut self, data: &Dataset) -> Result<()> {
        if self.config.schedule.mode.online() {
            return Ok(());
        }
        if let Some(dir) = self.config.schedule.teacher_checkpoint.clone() {
            let ck = Checkpoint::load(&dir)?;
            ck.load_store("teacher", self.teacher.store_mut())?;
            ck.load_store("teacher_disc", self.teacher_disc.store_mut())?;
            info!("loaded teacher from {}", dir.display());
            return Ok(());
        }
        let iters = self.config.schedule.teacher_pretrain_iters;
        if iters == 0 {
            return Err(Error::config(
                "schedule.teacher_pretrain_iters",
                "offline modes need a teacher checkpoint or pretraining iterations",
            ));
        }
        let mut order = BatchOrder::new(
            data.len(Split::Train),
            self.config.schedule.batch_size,
            derive_seed(self.config.seed, tag::PRETRAIN_DATA),
            true,
        )?;
        let lr0 = self.config.schedule.lr_teacher;
        for i in 0..iters {
            let (x, y) = data.gather(Split::Train, &order.indices(i))?;
            let lr = lr0 * (1.0 - i as f64 / iters as f64);
            let mut log = IterationLog::default();
            if !self.teacher_update(&x, &y, lr, &mut log)? {
                return Err(Error::Numerical(format!(
                    "teacher pretraining diverged at iteration {i}"
                )));
            }
        }
        info!("pretrained teacher for {iters} iterations");
        Ok(())
    }

    /// One full iteration: variational step, student step, teacher step.
    pub fn train_iteration(&mut self, data: &Dataset) -> Result<IterationLog> {
        let (ls, lt, le) = self.lrs();
        let mut log = IterationLog {
            iter: self.iteration,
            lr_student: ls,
            lr_teacher: lt,
            lr_ebm: le,
            lambda_mi: self.lambda_mi(),
            status: "ok".into(),
            ..Default::default()
        };
        let b = self.next_batch(data)?;
        let ok = match self.step_ebm(&b, &mut log) {
            Ok(true) => true,
            Ok(false) => {
                log.status = "nonfinite_ebm".into();
                false
            }
            Err(Error::SamplerDivergence { step }) => {
                warn!("iteration {}: sampler diverged at step {step}", self.iteration);
                log.status = format!("sampler_divergence_{step}");
                false
            }
            Err(e) => return Err(e),
        };
        let ok = ok && {
            let r = self.step_student(&b, &mut log)?;
            if !r {
                log.status = "nonfinite_student".into();
            }
            r
        };
        let ok = ok && {
            if self.config.schedule.mode.online() {
                let r = self.step_teacher(&b, &mut log)?;
                if !r {
                    log.status = "nonfinite_teacher".into();
                }
                r
            } else {
                true
            }
        };
        self.cached_negatives = None;
        self.nonfinite_streak = if ok { 0 } else { self.nonfinite_streak + 1 };
        self.iteration += 1;
        Ok(log)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<MetricsReport> {
        let (x, y) = data.split(Split::Val)?;
        evaluate(
            &self.student,
            Some(&self.teacher),
            &x,
            &y,
            &self.embedder,
            self.config.metrics.eval_batch,
        )
    }

    fn write_state(&mut self, w: &mut CheckpointWriter) {
        w.store("teacher", self.teacher.store());
        w.store("teacher_disc", self.teacher_disc.store());
        w.store("student", self.student.store());
        w.store("adapters", self.adapters.store());
        w.optimizer("teacher", &mut self.opt_teacher, self.teacher.store());
        w.optimizer("teacher_disc", &mut self.opt_disc, self.teacher_disc.store());
        w.optimizer("student", &mut self.opt_student, self.student.store());
        w.optimizer("adapters", &mut self.opt_adapters, self.adapters.store());
        if let Some(e) = &self.ebm {
            w.store("ebm", e.store());
            w.optimizer("ebm", &mut self.opt_ebm, e.store());
        }
        if let Some(v) = &self.vid {
            w.store("vid", v.store());
            w.optimizer("ebm", &mut self.opt_ebm, v.store());
        }
        if let Some(buf) = &self.buffer {
            for (i, t) in buf.entries().iter().enumerate() {
                w.array(format!("buffer/{i}"), t);
            }
        }
        w.rng("sampler", &self.sampler_rng);
        w.counter("nonfinite_streak", self.nonfinite_streak as u64);
    }

    /// Saves the state plus `files` (name, bytes) into `dir`.
    pub fn save(&mut self, dir: &Path, files: Vec<(String, Vec<u8>)>) -> Result<()> {
        let mut w = CheckpointWriter::new();
        self.write_state(&mut w);
        for (name, bytes) in files {
            w.file(&name, bytes);
        }
        w.write(dir, self.iteration, &self.config.to_toml())
    }

    /// Rebuilds the state described by `config` and overwrites it from `dir`.
    pub fn restore(config: &RunConfig, train_len: usize, dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let mut st = Self::new(config, train_len)?;
        ck.load_store("teacher", st.teacher.store_mut())?;
        ck.load_store("teacher_disc", st.teacher_disc.store_mut())?;
        ck.load_store("student", st.student.store_mut())?;
        ck.load_store("adapters", st.adapters.store_mut())?;
        ck.load_optimizer("teacher", &mut st.opt_teacher, st.teacher.store())?;
        ck.load_optimizer("teacher_disc", &mut st.opt_disc, st.teacher_disc.store())?;
        ck.load_optimizer("student", &mut st.opt_student, st.student.store())?;
        ck.load_optimizer("adapters", &mut st.opt_adapters, st.adapters.store())?;
        if let Some(e) = &mut st.ebm {
            ck.load_store("ebm", e.store_mut())?;
            ck.load_optimizer("ebm", &mut st.opt_ebm, e.store())?;
        }
        if let Some(v) = &mut st.vid {
            ck.load_store("vid", v.store_mut())?;
            ck.load_optimizer("ebm", &mut st.opt_ebm, v.store())?;
        }
        if let Some(buf) = &mut st.buffer {
            let entries = (0..buf.capacity())
                .map(|i| ck.array(&format!("buffer/{i}")))
                .collect::<Result<Vec<_>>>()?;
            buf.restore_entries(entries)?;
        }
        st.sampler_rng = ck.rng("sampler")?;
        st.nonfinite_streak = ck.counter("nonfinite_streak")? as usize;
        st.iteration = ck.manifest.iteration;
        Ok(st)
    }

    /// Loads only the student (and teacher, for the compression ratio) from
    /// a checkpoint, for evaluation.
    pub fn load_for_eval(config: &RunConfig, dir: &Path) -> Result<(Generator<f32>, Generator<f32>, usize)> {
        let ck = Checkpoint::load(dir)?;
        let mut student = Generator::build(&config.model.student_spec(), 0)?;
        let mut teacher = Generator::build(&config.model.teacher_spec(), 0)?;
        ck.load_store("student", student.store_mut())?;
        ck.load_store("teacher", teacher.store_mut())?;
        Ok((student, teacher, ck.manifest.iteration))
    }
}

/// Parameter stores of every component, for isolation checks.
pub fn component_stores(st: &TrainState) -> Vec<(&'static str, &ParamStore<f32>)> {
    let mut v = vec![
        ("teacher", st.teacher.store()),
        ("teacher_disc", st.teacher_disc.store()),
        ("student", st.student.store()),
        ("adapters", st.adapters.store()),
    ];
    if let Some(e) = &st.ebm {
        v.push(("ebm", e.store()));
    }
    if let Some(h) = &st.vid {
        v.push(("vid", h.store()));
    }
    v
}

/// Result of [`run`].
pub struct RunOutcome {
    pub state: TrainState,
    pub final_metrics: MetricsReport,
    pub csv_path: PathBuf,
}

fn open_csv(path: &Path, seed: Option<Vec<u8>>) -> Result<(csv::Writer<File>, bool)> {
    let has_rows = seed.is_some();
    if let Some(bytes) = seed {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    } else if path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((
        csv::WriterBuilder::new().has_headers(!has_rows).from_writer(f),
        has_rows,
    ))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

pub fn checkpoint_dir(output_dir: &Path, iteration: usize) -> PathBuf {
    output_dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration:06}"))
}

/// Trains for `schedule.total_iters`, writing the CSV log, evaluations and
/// checkpoints under `output_dir`. With `resume`, continues from that
/// checkpoint and carries over its logs.
pub fn run(config: &RunConfig, data: &Dataset, resume: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let out = config.output_dir.clone();
    config.echo()?;
    if config.deterministic_effective() {
        info!("deterministic numerics");
    }
    let train_len = data.len(Split::Train);
    let (mut state, carried) = match resume {
        Some(dir) => {
            let st = TrainState::restore(config, train_len, dir)?;
            let ck = Checkpoint::load(dir)?;
            let files = [TRAIN_CSV, EVAL_CSV, METRICS_JSONL]
                .iter()
                .map(|f| ck.file(f).ok())
                .collect::<Vec<_>>();
            info!("resuming at iteration {}", st.iteration);
            (st, files)
        }
        None => {
            let mut st = TrainState::new(config, train_len)?;
            st.prepare_teacher(data)?;
            (st, vec![None, None, None])
        }
    };
    let csv_path = out.join(TRAIN_CSV);
    let eval_path = out.join(EVAL_CSV);
    let jsonl_path = out.join(METRICS_JSONL);
    let (mut csv_w, _) = open_csv(&csv_path, carried[0].clone())?;
    let (mut eval_w, _) = open_csv(&eval_path, carried[1].clone())?;
    match &carried[2] {
        Some(b) => fs::write(&jsonl_path, b),
        None => fs::write(&jsonl_path, b""),
    }
    .map_err(|e| Error::io(&jsonl_path, e))?;

    let sched = config.schedule.clone();
    let mut last_eval = None;
    let started = Instant::now();
    let do_eval = |state: &TrainState, eval_w: &mut csv::Writer<File>| -> Result<MetricsReport> {
        let r = state.evaluate(data)?;
        let row = EvalRow {
            iter: state.iteration,
            toy_fid: r.toy_fid,
            ssim_to_target: r.ssim_to_target,
            l1_to_target: r.l1_to_target,
            psnr: r.psnr,
            params: r.params,
            macs: r.macs,
            compression_ratio: r.compression_ratio,
            sampler_invocations: r.sampler_invocations,
        };
        eval_w.serialize(&row).map_err(|e| csv_err(&eval_path, e))?;
        eval_w.flush().map_err(|e| Error::io(&eval_path, e))?;
        let line = serde_json::json!({ "iteration": state.iteration, "report": r });
        let mut f = OpenOptions::new()
            .append(true)
            .open(&jsonl_path)
            .map_err(|e| Error::io(&jsonl_path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&jsonl_path, e))?;
        Ok(r)
    };
    let snapshot = |paths: &[(&str, &Path)]| -> Result<Vec<(String, Vec<u8>)>> {
        paths
            .iter()
            .map(|(n, p)| Ok((n.to_string(), fs::read(p).map_err(|e| Error::io(p, e))?)))
            .collect()
    };
    let files = [
        (TRAIN_CSV, csv_path.as_path()),
        (EVAL_CSV, eval_path.as_path()),
        (METRICS_JSONL, jsonl_path.as_path()),
    ];

    while state.iteration < sched.total_iters {
        let log = state.train_iteration(data)?;
        if log.iter % sched.log_every == 0 {
            csv_w.serialize(&log).map_err(|e| csv_err(&csv_path, e))?;
            csv_w.flush().map_err(|e| Error::io(&csv_path, e))?;
        }
        if state.nonfinite_streak >= sched.nonfinite_patience {
            return Err(Error::Numerical(format!(
                "{} consecutive non-finite iterations ending at {}; last checkpoint kept",
                state.nonfinite_streak, log.iter
            )));
        }
        if state.iteration % 100 == 0 {
            info!(
                "iter {} ({:.1}s) student loss {:?}",
                state.iteration,
                started.elapsed().as_secs_f64(),
                log.loss_student
            );
        }
        let it = state.iteration;
        if config.metrics.eval_every > 0 && it % config.metrics.eval_every == 0 {
            last_eval = Some((it, do_eval(&state, &mut eval_w)?));
        }
        if sched.checkpoint_every > 0 && it % sched.checkpoint_every == 0 && it < sched.total_iters {
            let snap = snapshot(&files)?;
            state.save(&checkpoint_dir(&out, it), snap)?;
        }
    }
    let final_metrics = match last_eval {
        Some((it, r)) if it == state.iteration => r,
        _ => do_eval(&state, &mut eval_w)?,
    };
    let snap = snapshot(&files)?;
    state.save(&checkpoint_dir(&out, state.iteration), snap)?;
    Ok(RunOutcome {
        state,
        final_metrics,
        csv_path,
    })
}
