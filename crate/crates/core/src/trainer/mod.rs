//! Base-session training (backbone pretraining, then joint prompt training),
//! incremental sessions, evaluation and complete protocol runs.

mod checkpoint;
mod config;
mod trace;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{Method, PoolMode, Schedule, TrainConfig};
pub use trace::{TraceEvent, TraceStep};

use crate::autograd::Var;
use crate::backbone::{Backbone, ClassifierHead, HeadKind};
use crate::codebook::{PromptCodebook, SelectOptions, SelectionRecord};
use crate::data::{ContinualProtocol, SkeletonSequence, SkeletonTopology, SplitDataset};
use crate::error::{Error, Result};
use crate::metrics::{bwf, compute_accuracies, confusion_matrix, harmonic_mean, AccuracyHistory, SessionReport};
use crate::params::{sgd_step, Graph, ParamGrads, ParamGroup, ParamStore};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EXPAND: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

fn rng_for(seed: u64, stream: u64, session: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (session as u64).rotate_left(40));
    r.set_stream(stream);
    r
}

/// Everything a run carries from one session to the next: configuration, model
/// parameters, class bookkeeping and past evaluations. Holds no training samples.
#[derive(Clone, Debug)]
pub struct ContinualState {
    config: TrainConfig,
    topology: SkeletonTopology,
    time_steps: usize,
    store: ParamStore,
    backbone: Backbone,
    head: ClassifierHead,
    codebook: Option<PromptCodebook>,
    session: usize,
    session_classes: Vec<Vec<usize>>,
    history: AccuracyHistory,
    reports: Vec<SessionReport>,
}

/// Clip plus whatever of its forward pass is constant for the current phase.
struct Prepared<'a> {
    x: &'a SkeletonSequence,
    row: usize,
    index: usize,
    query: Option<Tensor>,
    embedding: Option<Tensor>,
    feature: Option<Tensor>,
}

struct ForwardOut {
    feature: Var,
    logits: Var,
    selected_gamma: Option<Var>,
    order: Option<Vec<usize>>,
}

struct SampleGrad {
    grads: ParamGrads,
    order: Option<Vec<usize>>,
    cross_entropy: f64,
    clustering: f64,
}

/// Mean per-sample losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLoss {
    pub session: usize,
    pub cross_entropy: f64,
    pub clustering: f64,
}

/// Optional outputs collected while a session runs.
#[derive(Default)]
struct Recorder {
    trace: Option<Vec<TraceEvent>>,
    selections: Option<Vec<SelectionRecord>>,
    losses: Vec<EpochLoss>,
}

impl Recorder {
    fn new(options: &RunOptions) -> Self {
        Recorder {
            trace: options.trace.then(Vec::new),
            selections: options.log_selections.then(Vec::new),
            losses: Vec::new(),
        }
    }

    fn event(&mut self, session: usize, step: Option<usize>, what: TraceStep) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent { session, step, what });
        }
    }

    fn finish(self, report: SessionReport) -> SessionLog {
        SessionLog {
            report,
            selections: self.selections.unwrap_or_default(),
            trace: self.trace.unwrap_or_default(),
            losses: self.losses,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory receiving one checkpoint per completed session.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the newest checkpoint in `checkpoint_dir`.
    pub resume: bool,
    pub log_selections: bool,
    pub trace: bool,
}

/// Outputs of one session.
#[derive(Clone, Debug)]
pub struct SessionLog {
    pub report: SessionReport,
    /// Training and evaluation selections, when requested.
    pub selections: Vec<SelectionRecord>,
    pub trace: Vec<TraceEvent>,
    pub losses: Vec<EpochLoss>,
}

pub struct RunOutcome {
    pub state: ContinualState,
    /// Logs of the sessions trained by this call.
    pub sessions: Vec<SessionLog>,
    /// Last session restored from a checkpoint, when resuming.
    pub resumed_from: Option<usize>,
}

impl ContinualState {
    /// Registers the main backbone and a classifier over `classes` classes.
    fn assemble<R: Rng + ?Sized>(config: &TrainConfig, topology: &SkeletonTopology, time_steps: usize, classes: usize, rng: &mut R) -> Result<Self> {
        config.validate_for(time_steps)?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, topology, time_steps, &mut store, "main", (ParamGroup::Embed, ParamGroup::Extract), rng)?;
        let head = ClassifierHead::new(&mut store, "head", config.head, classes, backbone.feature_dim(), config.cosine_scale, rng)?;
        Ok(ContinualState {
            config: config.clone(),
            topology: topology.clone(),
            time_steps,
            store,
            backbone,
            head,
            codebook: None,
            session: 0,
            session_classes: Vec::new(),
            history: AccuracyHistory::new(),
            reports: Vec::new(),
        })
    }

    fn attach_codebook<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let m = self.config.initial_pool_size(self.time_steps);
        self.codebook = Some(PromptCodebook::new(&mut self.store, &self.backbone, m, self.config.attach, rng)?);
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn codebook(&self) -> Option<&PromptCodebook> {
        self.codebook.as_ref()
    }

    /// Last completed session.
    pub fn session(&self) -> usize {
        self.session
    }

    pub fn session_classes(&self) -> &[Vec<usize>] {
        &self.session_classes
    }

    /// Every seen class in classifier row order.
    pub fn seen_classes(&self) -> Vec<usize> {
        self.session_classes.iter().flatten().copied().collect()
    }

    pub fn class_sessions(&self) -> BTreeMap<usize, usize> {
        self.session_classes
            .iter()
            .enumerate()
            .flat_map(|(t, cs)| cs.iter().map(move |&c| (c, t)))
            .collect()
    }

    pub fn history(&self) -> &AccuracyHistory {
        &self.history
    }

    pub fn reports(&self) -> &[SessionReport] {
        &self.reports
    }

    fn uses_prompts(&self) -> bool {
        self.codebook.is_some()
    }

    fn select_options(&self) -> SelectOptions {
        SelectOptions {
            sorting: self.config.sorting,
            coupled: self.config.coupled,
        }
    }

    fn rows(&self) -> BTreeMap<usize, usize> {
        self.seen_classes().into_iter().enumerate().map(|(i, c)| (c, i)).collect()
    }

    /// Caches the query features of every clip and, when the corresponding layers are
    /// frozen, its embedding or pooled feature.
    fn prepare<'a>(&self, data: &'a [SkeletonSequence], rows: &BTreeMap<usize, usize>) -> Result<Vec<Prepared<'a>>> {
        let frozen = |group| self.store.iter().filter(|(_, p)| p.group == group).all(|(_, p)| p.frozen);
        let embed_fixed = frozen(ParamGroup::Embed);
        let feature_fixed = embed_fixed && frozen(ParamGroup::Extract) && !self.uses_prompts();
        data.par_iter()
            .enumerate()
            .map(|(index, x)| {
                let row = *rows
                    .get(&x.class_id)
                    .ok_or_else(|| Error::Protocol(format!("sample of class {} is not part of this session", x.class_id)))?;
                let query = match &self.codebook {
                    Some(cb) => Some(cb.query_features(&self.store, x)?),
                    None => None,
                };
                let (mut embedding, mut feature) = (None, None);
                if embed_fixed {
                    let mut g = Graph::new(&self.store, false);
                    let e = self.backbone.embed(&mut g, x)?;
                    if feature_fixed {
                        let f = self.backbone.extract(&mut g, e)?;
                        feature = Some(g.tape.value(f).clone());
                    } else {
                        embedding = Some(g.tape.value(e).clone());
                    }
                }
                Ok(Prepared {
                    x,
                    row,
                    index,
                    query,
                    embedding,
                    feature,
                })
            })
            .collect()
    }

    fn forward(&self, g: &mut Graph<'_>, p: &Prepared<'_>, prompts: bool, dropout: Option<&mut ChaCha8Rng>) -> Result<ForwardOut> {
        let mut selected_gamma = None;
        let mut order = None;
        let feature = if let Some(f) = &p.feature {
            g.input(f.clone())
        } else {
            let mut e = match &p.embedding {
                Some(e) => g.input(e.clone()),
                None => self.backbone.embed(g, p.x)?,
            };
            if prompts {
                let cb = self.codebook.as_ref().expect("prompted forward needs a codebook");
                let computed;
                let query = match &p.query {
                    Some(q) => q,
                    None => {
                        computed = cb.query_features(&self.store, p.x)?;
                        &computed
                    }
                };
                let out = cb.prompt(g, e, query, self.select_options())?;
                e = out.embedding;
                selected_gamma = Some(out.selected_gamma);
                order = Some(out.selection.order);
            }
            self.backbone.extract(g, e)?
        };
        let rate = self.config.backbone.dropout;
        let feature = match dropout {
            Some(rng) if rate > 0.0 => {
                let d = g.tape.value(feature).cols();
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..d).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                g.tape.mul_const(feature, std::sync::Arc::new(Tensor::from_vec(1, d, mask)))
            }
            _ => feature,
        };
        let logits = self.head.logits(g, feature)?;
        Ok(ForwardOut {
            feature,
            logits,
            selected_gamma,
            order,
        })
    }

    /// Mean pooled feature over `prepared`, without dropout.
    fn mean_feature(&self, prepared: &[Prepared<'_>], prompts: bool) -> Result<Tensor> {
        let features: Vec<Result<Tensor>> = prepared
            .par_iter()
            .map(|p| {
                let mut g = Graph::new(&self.store, false);
                let out = self.forward(&mut g, p, prompts, None)?;
                Ok(g.tape.value(out.feature).clone())
            })
            .collect();
        let mut sum = Tensor::zeros(1, self.backbone.feature_dim());
        for f in features {
            sum.add_assign(&f?);
        }
        sum.scale_in_place(1.0 / prepared.len() as f64);
        Ok(sum)
    }

    /// Mean gradient of cross-entropy plus (optionally) clustering loss over a batch.
    /// Samples are processed in parallel and reduced in batch order.
    fn batch_gradients(&self, batch: &[&Prepared<'_>], prompts: bool, session: usize, step: usize) -> Result<(ParamGrads, Vec<Option<Vec<usize>>>, (f64, f64))> {
        let clustering = prompts && self.config.clustering;
        let results: Vec<Result<SampleGrad>> = batch
            .par_iter()
            .map(|p| {
                let mut g = Graph::new(&self.store, true);
                let mut rng = rng_for(self.config.seed ^ ((step as u64) << 20) ^ p.index as u64, STREAM_DROPOUT, session);
                let out = self.forward(&mut g, p, prompts, Some(&mut rng))?;
                let ce = g.tape.cross_entropy(out.logits, p.row);
                let mut loss = ce;
                let mut cl_value = 0.0;
                if let (true, Some(sg)) = (clustering, out.selected_gamma) {
                    let cb = self.codebook.as_ref().expect("codebook");
                    let cl = cb.clustering_loss(&mut g, sg, self.config.lambda);
                    cl_value = g.tape.scalar(cl);
                    loss = g.tape.add(loss, cl);
                }
                let value = g.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged { session, step, loss: value });
                }
                Ok(SampleGrad {
                    grads: g.backward(loss),
                    order: out.order,
                    cross_entropy: g.tape.scalar(ce),
                    clustering: cl_value,
                })
            })
            .collect();
        let mut total = ParamGrads::zeros_like(&self.store);
        let mut orders = Vec::with_capacity(batch.len());
        let mut losses = (0.0, 0.0);
        for r in results {
            let s = r?;
            total.accumulate(&s.grads);
            orders.push(s.order);
            losses.0 += s.cross_entropy;
            losses.1 += s.clustering;
        }
        total.scale(1.0 / batch.len() as f64);
        Ok((total, orders, losses))
    }

    fn check_permutation(&self, order: &[usize]) -> Result<()> {
        let Some(cb) = &self.codebook else { return Ok(()) };
        let m = cb.pool_size(&self.store);
        if m == cb.length() && cb.forced_tail().is_none() {
            let mut seen = vec![false; m];
            for &i in order {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::contract(format!("selection {order:?} repeats prompt {i}")));
                }
            }
        }
        Ok(())
    }

    /// Minibatch SGD over `prepared` for one schedule. `step` counts updates within the
    /// session and is advanced in place.
    #[allow(clippy::too_many_arguments)]
    fn run_epochs(
        &mut self,
        prepared: &[Prepared<'_>],
        schedule: &Schedule,
        prompts: bool,
        session: usize,
        step: &mut usize,
        shuffle: &mut ChaCha8Rng,
        lr: &dyn Fn(ParamGroup) -> f64,
        decay: bool,
        rec: &mut Recorder,
    ) -> Result<()> {
        if prepared.is_empty() {
            return Err(Error::Protocol(format!("session {session} has no training samples")));
        }
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let total_steps = schedule.epochs * prepared.len().div_ceil(schedule.batch);
        let mut local = 0;
        for _ in 0..schedule.epochs {
            order.shuffle(shuffle);
            let mut epoch = (0.0, 0.0);
            for chunk in order.chunks(schedule.batch) {
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
                let (mut grads, orders, losses) = self.batch_gradients(&batch, prompts, session, *step)?;
                if self.config.grad_clip > 0.0 {
                    grads.clip(self.config.grad_clip);
                }
                let factor = if decay {
                    0.5 * (1.0 + (std::f64::consts::PI * local as f64 / total_steps as f64).cos())
                } else {
                    1.0
                };
                local += 1;
                epoch.0 += losses.0;
                epoch.1 += losses.1;
                let s = Some(*step);
                if prompts {
                    for what in [TraceStep::Query, TraceStep::Sort, TraceStep::Gather, TraceStep::Attach] {
                        rec.event(session, s, what);
                    }
                }
                rec.event(session, s, TraceStep::Predict);
                rec.event(session, s, TraceStep::CrossEntropyLoss);
                if prompts && self.config.clustering {
                    rec.event(session, s, TraceStep::ClusteringLoss);
                }
                for (p, o) in batch.iter().zip(orders) {
                    if let Some(o) = o {
                        self.check_permutation(&o)?;
                        if let Some(log) = &mut rec.selections {
                            log.push(SelectionRecord {
                                session,
                                step: s,
                                sample_index: p.index,
                                order: o,
                            });
                        }
                    }
                }
                sgd_step(&mut self.store, &grads, |g| factor * lr(g));
                rec.event(session, s, TraceStep::Update);
                *step += 1;
            }
            let n = prepared.len() as f64;
            rec.losses.push(EpochLoss {
                session,
                cross_entropy: epoch.0 / n,
                clustering: epoch.1 / n,
            });
        }
        Ok(())
    }

    /// Predicted class ids for `test`, with the selection order of each clip when
    /// prompts are in use.
    pub fn predict(&self, test: &[SkeletonSequence]) -> Result<(Vec<usize>, Vec<Option<Vec<usize>>>)> {
        let seen = self.seen_classes();
        let results: Vec<Result<(usize, Option<Vec<usize>>)>> = test
            .par_iter()
            .enumerate()
            .map(|(index, x)| {
                let p = Prepared {
                    x,
                    row: 0,
                    index,
                    query: None,
                    embedding: None,
                    feature: None,
                };
                let mut g = Graph::new(&self.store, false);
                let out = self.forward(&mut g, &p, self.uses_prompts(), None)?;
                let logits = g.tape.value(out.logits).data();
                let best = logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                Ok((seen[best], out.order))
            })
            .collect();
        let mut preds = Vec::with_capacity(test.len());
        let mut orders = Vec::with_capacity(test.len());
        for r in results {
            let (p, o) = r?;
            preds.push(p);
            orders.push(o);
        }
        Ok((preds, orders))
    }

    /// Evaluates on the test clips of every seen class and appends the report and the
    /// accuracy-history row.
    fn evaluate_session(&mut self, dataset: &SplitDataset, started: Instant, rec: &mut Recorder) -> Result<SessionReport> {
        let seen = self.seen_classes();
        let test: Vec<SkeletonSequence> = dataset.test_for(&seen).cloned().collect();
        let (preds, orders) = self.predict(&test)?;
        let labels: Vec<usize> = test.iter().map(|x| x.class_id).collect();
        let t = self.session;
        let acc = compute_accuracies(&preds, &labels, &self.class_sessions(), t)?;
        let mut row = Vec::with_capacity(t + 1);
        for (j, classes) in self.session_classes.iter().enumerate() {
            let (hit, n) = preds
                .iter()
                .zip(&labels)
                .filter(|(_, y)| classes.contains(y))
                .fold((0usize, 0usize), |(h, n), (p, y)| (h + usize::from(p == y), n + 1));
            if n == 0 {
                return Err(Error::Protocol(format!("session {j} classes have no test samples")));
            }
            row.push(100.0 * hit as f64 / n as f64);
        }
        self.history.push_row(row)?;
        if let Some(log) = &mut rec.selections {
            for (i, o) in orders.into_iter().enumerate() {
                if let Some(order) = o {
                    log.push(SelectionRecord {
                        session: t,
                        step: None,
                        sample_index: i,
                        order,
                    });
                }
            }
        }
        let report = SessionReport {
            session: t,
            avg: acc.avg,
            old: acc.old,
            new: acc.new,
            a_hm: acc.old.map(|o| harmonic_mean(o, acc.new)),
            bwf: if t >= 1 { Some(bwf(&self.history, t + 1)?) } else { None },
            per_class: acc.per_class,
            confusion: confusion_matrix(&preds, &labels, &seen)?,
            classes: seen,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        self.reports.push(report.clone());
        Ok(report)
    }

    fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.store.set_group_frozen(group, frozen);
    }

    /// Freeze policy of incremental sessions. `old_rows` is the classifier size before
    /// expansion.
    fn apply_freeze_policy(&mut self, old_rows: usize) -> Vec<ParamGroup> {
        let method = self.config.method;
        for g in [ParamGroup::QueryEmbed, ParamGroup::QueryExtract] {
            self.set_frozen(g, true);
        }
        let backbone_frozen = method != Method::Ft;
        self.set_frozen(ParamGroup::Embed, backbone_frozen);
        self.set_frozen(ParamGroup::Extract, backbone_frozen);
        self.set_frozen(ParamGroup::Attach, backbone_frozen);
        self.set_frozen(ParamGroup::ClassifierScale, true);
        self.set_frozen(ParamGroup::Classifier, false);
        if method == Method::FeFrozen || self.config.head == HeadKind::LinearFrozenOld {
            self.head.freeze_old_rows(&mut self.store, old_rows);
        }
        if self.uses_prompts() {
            self.set_frozen(ParamGroup::QueryAdaptor, !self.config.qa_update);
        }
        let mut frozen: Vec<ParamGroup> = ParamGroup::ALL
            .into_iter()
            .filter(|&g| {
                let mut members = self.store.iter().filter(|(_, p)| p.group == g).peekable();
                members.peek().is_some() && members.all(|(_, p)| p.frozen)
            })
            .collect();
        frozen.sort();
        frozen
    }
}

/// Base session: backbone pretraining with cross-entropy, then (for prompt methods)
/// a copy into the frozen query backbone, prompt and key initialisation and joint
/// training of every main-model and prompt parameter with both losses. Query
/// features and the input of a linear head are centred on their base-session means.
pub fn train_base(
    config: &TrainConfig,
    topology: &SkeletonTopology,
    dataset: &SplitDataset,
    base_classes: &[usize],
    data: &[SkeletonSequence],
    options: &RunOptions,
) -> Result<(ContinualState, SessionLog)> {
    let started = Instant::now();
    if base_classes.is_empty() || data.is_empty() {
        return Err(Error::Protocol("base session is empty".into()));
    }
    let mut rng = rng_for(config.seed, STREAM_INIT, 0);
    let mut state = ContinualState::assemble(config, topology, dataset.time_steps, base_classes.len(), &mut rng)?;
    state.session_classes = vec![base_classes.to_vec()];
    let rows = state.rows();
    let mut rec = Recorder::new(options);
    let mut shuffle = rng_for(config.seed, STREAM_SHUFFLE, 0);
    let mut step = 0;

    let prepared = state.prepare(data, &rows)?;
    let lr = config.pretrain.lr;
    state.run_epochs(&prepared, &config.pretrain, false, 0, &mut step, &mut shuffle, &|_| lr, true, &mut rec)?;
    drop(prepared);

    let prompts = config.method.uses_prompts();
    if prompts {
        state.attach_codebook(&mut rng)?;
        let cb = state.codebook.as_ref().expect("codebook");
        cb.center_queries(&mut state.store, data)?;
    }
    let prepared = state.prepare(data, &rows)?;
    let lr = config.base.lr;
    state.run_epochs(&prepared, &config.base, prompts, 0, &mut step, &mut shuffle, &|_| lr, true, &mut rec)?;
    let mean = state.mean_feature(&prepared, prompts)?;
    drop(prepared);
    state.head.set_center(&mut state.store, &mean);

    if config.method != Method::Ft {
        state.set_frozen(ParamGroup::Embed, true);
        state.set_frozen(ParamGroup::Extract, true);
    }
    state.store.round_to_f32();
    state.session = 0;
    let report = state.evaluate_session(dataset, started, &mut rec)?;
    Ok((state, rec.finish(report)))
}

/// Incremental session `t`: optional pool expansion, classifier expansion, freeze
/// policy, then minibatch training on the few-shot data.
pub fn train_session(
    state: &mut ContinualState,
    dataset: &SplitDataset,
    t: usize,
    classes: &[usize],
    data: &[SkeletonSequence],
    options: &RunOptions,
) -> Result<SessionLog> {
    let started = Instant::now();
    if t != state.session + 1 {
        return Err(Error::Protocol(format!("session {t} cannot follow session {}", state.session)));
    }
    let seen = state.seen_classes();
    if let Some(c) = classes.iter().find(|c| seen.contains(c)) {
        return Err(Error::Protocol(format!("class {c} of session {t} was already learned")));
    }
    if classes.is_empty() {
        return Err(Error::Protocol(format!("session {t} introduces no classes")));
    }
    let config = state.config.clone();
    let mut rec = Recorder::new(options);

    if let (Some(cb), PoolMode::Expand) = (&mut state.codebook, config.pool_mode) {
        let mut rng = rng_for(config.seed, STREAM_EXPAND, t);
        cb.expand_pool(&mut state.store, config.expand_r, &mut rng)?;
        rec.event(t, None, TraceStep::ExpandPool { added: config.expand_r });
    }
    let old_rows = state.head.class_count(&state.store);
    state.head.expand(&mut state.store, classes.len())?;
    rec.event(t, None, TraceStep::ExpandClassifier { added: classes.len() });
    state.session_classes.push(classes.to_vec());
    let frozen = state.apply_freeze_policy(old_rows);
    rec.event(t, None, TraceStep::Freeze { frozen });

    let rows: BTreeMap<usize, usize> = state.rows().into_iter().filter(|(c, _)| classes.contains(c)).collect();
    let prepared = state.prepare(data, &rows)?;
    let mut shuffle = rng_for(config.seed, STREAM_SHUFFLE, t);
    let mut step = 0;
    let (session_lr, adaptor_lr) = (config.session.lr, config.adaptor_lr);
    let lr = move |g: ParamGroup| if g == ParamGroup::QueryAdaptor { adaptor_lr } else { session_lr };
    let prompts = state.uses_prompts();
    state.run_epochs(&prepared, &config.session, prompts, t, &mut step, &mut shuffle, &lr, false, &mut rec)?;
    drop(prepared);

    state.store.round_to_f32();
    state.session = t;
    let report = state.evaluate_session(dataset, started, &mut rec)?;
    Ok(rec.finish(report))
}

/// `session-NN.ckpt` inside `dir`.
pub fn checkpoint_path(dir: &Path, session: usize) -> PathBuf {
    dir.join(format!("session-{session:02}.ckpt"))
}

/// Newest `session-NN.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(t) = name
            .to_str()
            .and_then(|n| n.strip_prefix("session-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| t > *b) {
            best = Some((t, entry.path()));
        }
    }
    Ok(best)
}

/// Trains the base session and every incremental session in order, evaluating on the
/// test clips of all seen classes after each and checkpointing when asked.
pub fn run_protocol(
    config: &TrainConfig,
    topology: &SkeletonTopology,
    dataset: &SplitDataset,
    protocol: &ContinualProtocol,
    subsets: &[Vec<SkeletonSequence>],
    options: &RunOptions,
) -> Result<RunOutcome> {
    let mut sessions = Vec::new();
    let (state, resumed_from) = run_protocol_with(config, topology, dataset, protocol, subsets, options, |_, log| {
        sessions.push(log);
        Ok(true)
    })?;
    Ok(RunOutcome {
        state,
        sessions,
        resumed_from,
    })
}

/// Like [`run_protocol`], but hands each finished session to `on_session` right after
/// its checkpoint is written. Returning `false` stops the run early.
///
/// Returns the final state and the session a resumed run started from.
pub fn run_protocol_with(
    config: &TrainConfig,
    topology: &SkeletonTopology,
    dataset: &SplitDataset,
    protocol: &ContinualProtocol,
    subsets: &[Vec<SkeletonSequence>],
    options: &RunOptions,
    mut on_session: impl FnMut(&ContinualState, SessionLog) -> Result<bool>,
) -> Result<(ContinualState, Option<usize>)> {
    protocol.validate()?;
    if subsets.len() != protocol.session_count() + 1 {
        return Err(Error::Protocol(format!(
            "{} training subsets for {} sessions",
            subsets.len(),
            protocol.session_count() + 1
        )));
    }
    config.validate_for(dataset.time_steps)?;
    let save = |state: &ContinualState| -> Result<()> {
        if let Some(dir) = &options.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(state, &checkpoint_path(dir, state.session))?;
        }
        Ok(())
    };

    let restored = match (&options.checkpoint_dir, options.resume) {
        (Some(dir), true) => latest_checkpoint(dir)?,
        _ => None,
    };
    let mut resumed_from = None;
    let mut state = match restored {
        Some((_, path)) => {
            let state = load_checkpoint(&path)?;
            if state.config != *config {
                return Err(Error::config("resume", format!("{} was written with a different configuration", path.display())));
            }
            if state.session > protocol.session_count() {
                return Err(Error::config("resume", format!("{} is past the last session of the protocol", path.display())));
            }
            for (t, classes) in state.session_classes.iter().enumerate() {
                if classes != protocol.session_classes(t) {
                    return Err(Error::config("resume", format!("{} follows a different class protocol", path.display())));
                }
            }
            resumed_from = Some(state.session);
            state
        }
        None => {
            let (state, log) = train_base(config, topology, dataset, &protocol.base_classes, &subsets[0], options)?;
            save(&state)?;
            if !on_session(&state, log)? {
                return Ok((state, resumed_from));
            }
            state
        }
    };
    for t in state.session + 1..=protocol.session_count() {
        let log = train_session(&mut state, dataset, t, protocol.session_classes(t), &subsets[t], options)?;
        save(&state)?;
        if !on_session(&state, log)? {
            break;
        }
    }
    Ok((state, resumed_from))
}

#[cfg(test)]
mod tests;
