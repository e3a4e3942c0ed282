//! Augmented dual-tower recommender trained with BPR.
//!
//! Each tower reads `[e_id || e_s || mean(sequence ids) || mean(neighbor ids)]`
//! where `e_s` concatenates one semantic feature row per codebook layer.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use log::{info, warn};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Tensor};
use crate::data::{EntityKind, InteractionRecord, NegativeSampler};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, Scorer};
use crate::nn::{log_sigmoid, sigmoid, Activation, AdamConfig, AdamState, DenseTrace, EmbeddingTable, Parameters, Tower};
use crate::quantizer::SemanticId;

pub fn score(zu: &DVector<f64>, zi: &DVector<f64>) -> f64 {
    sigmoid(zu.dot(zi))
}

/// `-ln sigmoid(pos - neg)` on normalized scores.
pub fn bpr_loss(pos: f64, neg: f64) -> f64 {
    -log_sigmoid(pos - neg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BprGrad {
    pub loss: f64,
    pub grad_user: DVector<f64>,
    pub grad_pos: DVector<f64>,
    pub grad_neg: DVector<f64>,
}

/// BPR loss of one triple of top embeddings and its gradients.
pub fn bpr_triple(zu: &DVector<f64>, zi: &DVector<f64>, zj: &DVector<f64>) -> BprGrad {
    let yi = score(zu, zi);
    let yj = score(zu, zj);
    let loss = bpr_loss(yi, yj);
    let g = sigmoid(yi - yj) - 1.0;
    let da = g * yi * (1.0 - yi);
    let db = -g * yj * (1.0 - yj);
    BprGrad {
        loss,
        grad_user: zi * da + zj * db,
        grad_pos: zu * da,
        grad_neg: zu * db,
    }
}

/// Which augmentation blocks are active; a disabled block is fed zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub user_semantic: bool,
    pub item_semantic: bool,
    pub user_linkage: bool,
    pub item_linkage: bool,
}

impl Augmentation {
    pub fn full() -> Self {
        Self {
            user_semantic: true,
            item_semantic: true,
            user_linkage: true,
            item_linkage: true,
        }
    }

    pub fn off() -> Self {
        Self {
            user_semantic: false,
            item_semantic: false,
            user_linkage: false,
            item_linkage: false,
        }
    }

    pub fn semantic(&self, kind: EntityKind) -> bool {
        match kind {
            EntityKind::User => self.user_semantic,
            EntityKind::Item => self.item_semantic,
        }
    }

    pub fn linkage(&self, kind: EntityKind) -> bool {
        match kind {
            EntityKind::User => self.user_linkage,
            EntityKind::Item => self.item_linkage,
        }
    }

    fn bits(&self) -> [bool; 4] {
        [self.user_semantic, self.item_semantic, self.user_linkage, self.item_linkage]
    }
}

impl Default for Augmentation {
    fn default() -> Self {
        Self::full()
    }
}

/// Everything a tower needs to embed one entity at one point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityContext {
    pub entity: usize,
    /// Train interactions visible at the context time; together with the
    /// entity it identifies the context.
    pub visible: usize,
    pub semantic_id: SemanticId,
    /// Interacted entities of the other kind, oldest first.
    pub sequence: Vec<usize>,
    /// Pattern neighbors of the same kind.
    pub neighbors: Vec<usize>,
}

/// Supplies entity contexts, optionally truncated strictly before a time.
pub trait ContextSource {
    fn context(&self, kind: EntityKind, entity: usize, before: Option<u64>) -> Result<Rc<EntityContext>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecConfig {
    pub id_dim: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
    pub codebook_size: usize,
    pub init_std: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub eval_k: usize,
    /// In-batch negative pool for validation.
    pub valid_batch: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            id_dim: 64,
            hidden: 128,
            output: 64,
            layers: 4,
            codebook_size: 128,
            init_std: 0.1,
            epochs: 20,
            batch_size: 1024,
            lr: 1e-3,
            patience: 3,
            eval_k: 10,
            valid_batch: 1024,
            seed: 0,
            augmentation: Augmentation::full(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub user_id: EmbeddingTable,
    pub item_id: EmbeddingTable,
    pub user_semantic: Vec<EmbeddingTable>,
    pub item_semantic: Vec<EmbeddingTable>,
    pub user_tower: Tower,
    pub item_tower: Tower,
    pub augmentation: Augmentation,
}

impl Parameters for RecModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.user_id.as_slice(), self.item_id.as_slice()];
        out.extend(self.user_semantic.iter().map(EmbeddingTable::as_slice));
        out.extend(self.item_semantic.iter().map(EmbeddingTable::as_slice));
        out.extend(self.user_tower.tensors());
        out.extend(self.item_tower.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.user_id.tensors_mut();
        out.extend(self.item_id.tensors_mut());
        out.extend(self.user_semantic.iter_mut().flat_map(|t| t.tensors_mut()));
        out.extend(self.item_semantic.iter_mut().flat_map(|t| t.tensors_mut()));
        out.extend(self.user_tower.tensors_mut());
        out.extend(self.item_tower.tensors_mut());
        out
    }
}

/// `[F_1(c_1) || ... || F_L(c_L)]`.
pub fn semantic_feature_embedding(id: &SemanticId, tables: &[EmbeddingTable]) -> Result<DVector<f64>> {
    if id.layers() != tables.len() {
        return Err(Error::shape(tables.len(), id.layers()));
    }
    let mut out = Vec::with_capacity(tables.iter().map(EmbeddingTable::dim).sum());
    for (&c, table) in id.0.iter().zip(tables) {
        out.extend_from_slice(table.checked_row(c)?);
    }
    Ok(DVector::from_vec(out))
}

fn checked_mean(table: &EmbeddingTable, ids: &[usize], out: &mut [f64]) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    let inv = 1.0 / ids.len() as f64;
    for &id in ids {
        for (o, v) in out.iter_mut().zip(table.checked_row(id)?) {
            *o += v * inv;
        }
    }
    Ok(())
}

pub struct Forward {
    traces: Vec<DenseTrace>,
}

impl Forward {
    pub fn output(&self) -> &DVector<f64> {
        &self.traces.last().expect("non-empty tower").output
    }
}

impl RecModel {
    pub fn new<R: Rng + ?Sized>(users: usize, items: usize, config: &RecConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || !config.id_dim.is_multiple_of(config.layers) {
            return Err(Error::Invalid(format!(
                "embedding dim {} is not divisible by {} codebook layers",
                config.id_dim, config.layers
            )));
        }
        let sem_dim = config.id_dim / config.layers;
        let std = config.init_std;
        let sem = |rng: &mut R| {
            (0..config.layers)
                .map(|_| EmbeddingTable::normal(config.codebook_size, sem_dim, std, rng))
                .collect::<Vec<_>>()
        };
        let user_id = EmbeddingTable::normal(users, config.id_dim, std, rng);
        let item_id = EmbeddingTable::normal(items, config.id_dim, std, rng);
        let user_semantic = sem(rng);
        let item_semantic = sem(rng);
        let dims = [4 * config.id_dim, config.hidden, config.output];
        Ok(Self {
            user_id,
            item_id,
            user_semantic,
            item_semantic,
            user_tower: Tower::new(&dims, Activation::Gelu, rng),
            item_tower: Tower::new(&dims, Activation::Gelu, rng),
            augmentation: config.augmentation,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            user_id: self.user_id.zeros_like(),
            item_id: self.item_id.zeros_like(),
            user_semantic: self.user_semantic.iter().map(EmbeddingTable::zeros_like).collect(),
            item_semantic: self.item_semantic.iter().map(EmbeddingTable::zeros_like).collect(),
            user_tower: self.user_tower.zeros_like(),
            item_tower: self.item_tower.zeros_like(),
            augmentation: self.augmentation,
        }
    }

    pub fn id_dim(&self) -> usize {
        self.user_id.dim()
    }

    fn ids(&self, kind: EntityKind) -> &EmbeddingTable {
        match kind {
            EntityKind::User => &self.user_id,
            EntityKind::Item => &self.item_id,
        }
    }

    fn ids_mut(&mut self, kind: EntityKind) -> &mut EmbeddingTable {
        match kind {
            EntityKind::User => &mut self.user_id,
            EntityKind::Item => &mut self.item_id,
        }
    }

    pub fn semantic_tables(&self, kind: EntityKind) -> &[EmbeddingTable] {
        match kind {
            EntityKind::User => &self.user_semantic,
            EntityKind::Item => &self.item_semantic,
        }
    }

    fn semantic_tables_mut(&mut self, kind: EntityKind) -> &mut [EmbeddingTable] {
        match kind {
            EntityKind::User => &mut self.user_semantic,
            EntityKind::Item => &mut self.item_semantic,
        }
    }

    pub fn tower(&self, kind: EntityKind) -> &Tower {
        match kind {
            EntityKind::User => &self.user_tower,
            EntityKind::Item => &self.item_tower,
        }
    }

    fn tower_mut(&mut self, kind: EntityKind) -> &mut Tower {
        match kind {
            EntityKind::User => &mut self.user_tower,
            EntityKind::Item => &mut self.item_tower,
        }
    }

    pub fn input_embedding(&self, kind: EntityKind, ctx: &EntityContext) -> Result<DVector<f64>> {
        let d = self.id_dim();
        let mut input = vec![0.0; 4 * d];
        input[..d].copy_from_slice(self.ids(kind).checked_row(ctx.entity)?);
        if self.augmentation.semantic(kind) {
            let es = semantic_feature_embedding(&ctx.semantic_id, self.semantic_tables(kind))?;
            if es.len() != d {
                return Err(Error::shape(d, es.len()));
            }
            input[d..2 * d].copy_from_slice(es.as_slice());
        }
        checked_mean(self.ids(kind.other()), &ctx.sequence, &mut input[2 * d..3 * d])?;
        if self.augmentation.linkage(kind) {
            checked_mean(self.ids(kind), &ctx.neighbors, &mut input[3 * d..])?;
        }
        Ok(DVector::from_vec(input))
    }

    pub fn forward(&self, kind: EntityKind, ctx: &EntityContext) -> Result<Forward> {
        let input = self.input_embedding(kind, ctx)?;
        Ok(Forward {
            traces: self.tower(kind).forward(&input)?,
        })
    }

    /// Top embedding of an entity.
    pub fn embed(&self, kind: EntityKind, ctx: &EntityContext) -> Result<DVector<f64>> {
        let input = self.input_embedding(kind, ctx)?;
        self.tower(kind).apply(&input)
    }

    /// Accumulates gradients of `upstream` (w.r.t. the tower output) into
    /// `grad`, through the tower and every embedding row in the input.
    pub fn backward(&self, kind: EntityKind, ctx: &EntityContext, fwd: &Forward, upstream: &DVector<f64>, grad: &mut RecModel) -> Result<()> {
        let g = self.tower(kind).backward(&fwd.traces, upstream, grad.tower_mut(kind))?;
        let g = g.as_slice();
        let d = self.id_dim();
        grad.ids_mut(kind).add_to_row(ctx.entity, &g[..d], 1.0);
        if self.augmentation.semantic(kind) {
            let mut lo = d;
            for (&c, table) in ctx.semantic_id.0.iter().zip(grad.semantic_tables_mut(kind)) {
                let w = table.dim();
                table.add_to_row(c, &g[lo..lo + w], 1.0);
                lo += w;
            }
        }
        if !ctx.sequence.is_empty() {
            let inv = 1.0 / ctx.sequence.len() as f64;
            let table = grad.ids_mut(kind.other());
            for &j in &ctx.sequence {
                table.add_to_row(j, &g[2 * d..3 * d], inv);
            }
        }
        if self.augmentation.linkage(kind) && !ctx.neighbors.is_empty() {
            let inv = 1.0 / ctx.neighbors.len() as f64;
            let table = grad.ids_mut(kind);
            for &n in &ctx.neighbors {
                table.add_to_row(n, &g[3 * d..], inv);
            }
        }
        Ok(())
    }

    /// BPR loss of one triple; accumulates gradients when `grad` is given.
    pub fn triple_loss(&self, user: &EntityContext, pos: &EntityContext, neg: &EntityContext, grad: Option<&mut RecModel>) -> Result<f64> {
        let fu = self.forward(EntityKind::User, user)?;
        let fi = self.forward(EntityKind::Item, pos)?;
        let fj = self.forward(EntityKind::Item, neg)?;
        let bpr = bpr_triple(fu.output(), fi.output(), fj.output());
        if let Some(grad) = grad {
            self.backward(EntityKind::User, user, &fu, &bpr.grad_user, grad)?;
            self.backward(EntityKind::Item, pos, &fi, &bpr.grad_pos, grad)?;
            self.backward(EntityKind::Item, neg, &fj, &bpr.grad_neg, grad)?;
        }
        Ok(bpr.loss)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let flags = self.augmentation.bits().map(|b| if b { 1.0 } else { 0.0 });
        let mut out = vec![
            Tensor::new("hyper", vec![2], vec![self.user_semantic.len() as f64, self.user_tower.layers.len() as f64]),
            Tensor::new("augmentation", vec![4], flags.to_vec()),
            self.user_id.to_tensor("user_id"),
            self.item_id.to_tensor("item_id"),
        ];
        for (l, t) in self.user_semantic.iter().enumerate() {
            out.push(t.to_tensor(format!("user_semantic.{l}")));
        }
        for (l, t) in self.item_semantic.iter().enumerate() {
            out.push(t.to_tensor(format!("item_semantic.{l}")));
        }
        out.extend(self.user_tower.to_tensors("user_tower"));
        out.extend(self.item_tower.to_tensors("item_tower"));
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let hyper = &Tensor::find(tensors, "hyper")?.data;
        let flags = &Tensor::find(tensors, "augmentation")?.data;
        if hyper.len() != 2 || flags.len() != 4 {
            return Err(Error::Checkpoint("malformed recommender header".into()));
        }
        let (layers, depth) = (hyper[0] as usize, hyper[1] as usize);
        let table = |name: String| EmbeddingTable::from_tensor(Tensor::find(tensors, &name)?);
        let semantic = |prefix: &str| (0..layers).map(|l| table(format!("{prefix}.{l}"))).collect::<Result<Vec<_>>>();
        Ok(Self {
            user_id: table("user_id".into())?,
            item_id: table("item_id".into())?,
            user_semantic: semantic("user_semantic")?,
            item_semantic: semantic("item_semantic")?,
            user_tower: Tower::from_tensors("user_tower", tensors, depth, Activation::Gelu)?,
            item_tower: Tower::from_tensors("item_tower", tensors, depth, Activation::Gelu)?,
            augmentation: Augmentation {
                user_semantic: flags[0] != 0.0,
                item_semantic: flags[1] != 0.0,
                user_linkage: flags[2] != 0.0,
                item_linkage: flags[3] != 0.0,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }
}

/// Scores with a frozen model, memoizing top embeddings per context. Returns
/// the dot-product logit, which orders candidates like the sigmoid score.
pub struct ModelScorer<'a, S: ContextSource> {
    pub model: &'a RecModel,
    pub source: &'a S,
    cache: RefCell<HashMap<(EntityKind, usize, usize), Rc<DVector<f64>>>>,
}

impl<'a, S: ContextSource> ModelScorer<'a, S> {
    pub fn new(model: &'a RecModel, source: &'a S) -> Self {
        Self {
            model,
            source,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn embedding(&self, kind: EntityKind, entity: usize, before: Option<u64>) -> Result<Rc<DVector<f64>>> {
        let ctx = self.source.context(kind, entity, before)?;
        let key = (kind, entity, ctx.visible);
        if let Some(z) = self.cache.borrow().get(&key) {
            return Ok(z.clone());
        }
        let z = Rc::new(self.model.embed(kind, &ctx)?);
        self.cache.borrow_mut().insert(key, z.clone());
        Ok(z)
    }
}

impl<S: ContextSource> Scorer for ModelScorer<'_, S> {
    fn score(&mut self, user: usize, item: usize, at: u64) -> Result<f64> {
        let zu = self.embedding(EntityKind::User, user, Some(at))?;
        let zi = self.embedding(EntityKind::Item, item, Some(at))?;
        // sigmoid is monotone; ranking on the logit keeps order where it rounds to 1.0
        Ok(zu.dot(&zi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall: f64,
    pub valid_ndcg: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord], k: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "epoch,train_loss,valid_recall@{k},valid_ndcg@{k}")?;
        for h in history {
            writeln!(out, "{},{},{},{}", h.epoch, h.train_loss, h.valid_recall, h.valid_ndcg)?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub struct TrainInputs<'a, S: ContextSource> {
    pub train: &'a [InteractionRecord],
    pub valid: &'a [InteractionRecord],
    pub users: usize,
    pub items: usize,
    /// Negative sampling over train positives.
    pub sampler: &'a NegativeSampler,
    /// Positives over the whole log, excluded from evaluation negatives.
    pub known: &'a NegativeSampler,
    pub source: &'a S,
    /// Where the last finite model is written after every epoch.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RecModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: Option<MetricsReport>,
}

/// Minibatch Adam over BPR triples with early stopping on validation
/// Recall@K. A non-finite loss aborts with [`Error::Diverged`]; the
/// checkpoint file then still holds the last finite epoch.
pub fn train<S: ContextSource>(inputs: &TrainInputs<'_, S>, config: &RecConfig) -> Result<TrainOutcome> {
    if inputs.train.is_empty() {
        return Err(Error::Empty("recommender train slice".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RecModel::new(inputs.users, inputs.items, config, &mut rng)?;
    let mut grad = model.zeros_like();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model);
    let mut order: Vec<usize> = (0..inputs.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, RecModel, MetricsReport)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.zero();
            let mut batch_loss = 0.0;
            for &k in batch {
                let r = &inputs.train[k];
                let neg = inputs.sampler.sample(r.user, &mut rng)?;
                let cu = inputs.source.context(EntityKind::User, r.user, Some(r.timestamp))?;
                let ci = inputs.source.context(EntityKind::Item, r.item, Some(r.timestamp))?;
                let cj = inputs.source.context(EntityKind::Item, neg, Some(r.timestamp))?;
                batch_loss += model.triple_loss(&cu, &ci, &cj, Some(&mut grad))?;
            }
            if !batch_loss.is_finite() {
                warn!("recommender diverged in epoch {epoch}");
                return Err(Error::Diverged {
                    epoch,
                    message: "BPR loss is not finite".into(),
                });
            }
            total += batch_loss;
            grad.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grad)?;
        }
        if !model.all_finite() {
            return Err(Error::Diverged {
                epoch,
                message: "recommender parameters are not finite".into(),
            });
        }
        if let Some(path) = &inputs.checkpoint {
            model.save(path)?;
        }
        let train_loss = total / inputs.train.len() as f64;
        let report = if inputs.valid.is_empty() {
            None
        } else {
            let mut scorer = ModelScorer::new(&model, inputs.source);
            Some(evaluate(&mut scorer, inputs.valid, inputs.known, config.valid_batch, &[config.eval_k])?)
        };
        let (recall, ndcg) = report.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.recall[0], r.ndcg[0]));
        info!("train epoch {epoch}: loss {train_loss:.6} valid recall@{} {recall:.4}", config.eval_k);
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_recall: recall,
            valid_ndcg: ndcg,
        });
        let Some(report) = report else {
            best = Some((f64::NEG_INFINITY, epoch, model.clone(), MetricsReport::default()));
            continue;
        };
        match &best {
            Some((b, ..)) if recall <= *b => {
                if epoch - best.as_ref().map_or(0, |b| b.1) >= config.patience {
                    info!("early stop at epoch {epoch}");
                    break;
                }
            }
            _ => best = Some((recall, epoch, model.clone(), report)),
        }
    }
    let (_, best_epoch, model, report) = best.unwrap_or((0.0, 0, model, MetricsReport::default()));
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_valid: (!inputs.valid.is_empty()).then_some(report),
    })
}
