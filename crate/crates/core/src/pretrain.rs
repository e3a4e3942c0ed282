//! Feature-only dual tower that produces the representation matrices fed to
//! the quantizer.
//!
//! Entity ids never reach this model: a user is described by its own
//! categorical features plus the mean feature embedding of the items in its
//! recent sequence, and symmetrically for items.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Tensor};
use crate::data::{AttributeTable, EntityKind, InteractionRecord, NegativeSampler, SequenceStore};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, EmbeddingTable, Parameters, Tower};
use crate::recommender::bpr_triple;

/// One categorical feature. Slot 0 is reserved for unknown values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFamily {
    pub name: String,
    pub values: Vec<String>,
}

impl FeatureFamily {
    /// Vocabulary size including the unknown slot.
    pub fn vocab(&self) -> usize {
        self.values.len() + 1
    }
}

/// Features of every entity of one kind, as slot indices per family.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityFeatures {
    pub families: Vec<FeatureFamily>,
    /// `slots[entity][family]`
    pub slots: Vec<Vec<usize>>,
}

impl EntityFeatures {
    pub fn entity_count(&self) -> usize {
        self.slots.len()
    }

    fn from_attributes(table: &AttributeTable) -> Self {
        let mut families: Vec<FeatureFamily> = table
            .families
            .iter()
            .map(|name| FeatureFamily {
                name: name.clone(),
                values: Vec::new(),
            })
            .collect();
        let mut lookup: Vec<HashMap<String, usize>> = vec![HashMap::new(); families.len()];
        let slots = table
            .values
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(f, v)| match v {
                        None => 0,
                        Some(v) => *lookup[f].entry(v.clone()).or_insert_with(|| {
                            families[f].values.push(v.clone());
                            families[f].values.len()
                        }),
                    })
                    .collect()
            })
            .collect();
        Self { families, slots }
    }

    fn push_bucket_family(&mut self, name: &str, buckets: &[usize]) {
        self.families.push(FeatureFamily {
            name: name.into(),
            values: (0..ACTIVITY_BUCKETS).map(|b| format!("d{b}")).collect(),
        });
        for (row, &b) in self.slots.iter_mut().zip(buckets) {
            row.push(b + 1);
        }
    }
}

const ACTIVITY_BUCKETS: usize = 10;

/// Log-scaled decile of `count` relative to `max`.
pub fn activity_bucket(count: usize, max: usize) -> usize {
    if max == 0 {
        return 0;
    }
    let frac = (count as f64).ln_1p() / (max as f64).ln_1p();
    ((frac * ACTIVITY_BUCKETS as f64) as usize).min(ACTIVITY_BUCKETS - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    pub users: EntityFeatures,
    pub items: EntityFeatures,
}

impl FeatureSchema {
    /// Items get their attribute columns plus a popularity decile; users get
    /// their attribute columns, or an activity decile when they have none.
    pub fn build(user_attrs: &AttributeTable, item_attrs: &AttributeTable, sequences: &SequenceStore) -> Self {
        let mut users = EntityFeatures::from_attributes(user_attrs);
        let mut items = EntityFeatures::from_attributes(item_attrs);
        let item_counts: Vec<usize> = (0..sequences.item_count()).map(|i| sequences.item_activity(i)).collect();
        let max = item_counts.iter().copied().max().unwrap_or(0);
        let buckets: Vec<usize> = item_counts.iter().map(|&c| activity_bucket(c, max)).collect();
        items.push_bucket_family("popularity", &buckets);
        if users.families.is_empty() {
            let user_counts: Vec<usize> = (0..sequences.user_count()).map(|u| sequences.user_activity(u)).collect();
            let max = user_counts.iter().copied().max().unwrap_or(0);
            let buckets: Vec<usize> = user_counts.iter().map(|&c| activity_bucket(c, max)).collect();
            users.push_bucket_family("activity", &buckets);
        }
        Self { users, items }
    }

    pub fn of(&self, kind: EntityKind) -> &EntityFeatures {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub attr_dim: usize,
    pub hidden: usize,
    pub output: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            attr_dim: 16,
            hidden: 128,
            output: 64,
            epochs: 10,
            batch_size: 1024,
            lr: 1e-3,
            patience: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub user_tables: Vec<EmbeddingTable>,
    pub item_tables: Vec<EmbeddingTable>,
    pub user_tower: Tower,
    pub item_tower: Tower,
}

impl Parameters for PretrainModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.user_tables.iter().map(EmbeddingTable::as_slice));
        out.extend(self.item_tables.iter().map(EmbeddingTable::as_slice));
        out.extend(self.user_tower.tensors());
        out.extend(self.item_tower.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.user_tables.iter_mut().flat_map(|t| t.tensors_mut()));
        out.extend(self.item_tables.iter_mut().flat_map(|t| t.tensors_mut()));
        out.extend(self.user_tower.tensors_mut());
        out.extend(self.item_tower.tensors_mut());
        out
    }
}

/// Gradient accumulation target for the features of one entity.
struct FeatureGrad<'a> {
    own: &'a mut [EmbeddingTable],
    neighbor: &'a mut [EmbeddingTable],
}

impl PretrainModel {
    pub fn new<R: Rng + ?Sized>(schema: &FeatureSchema, config: &PretrainConfig, rng: &mut R) -> Self {
        let tables = |f: &EntityFeatures, rng: &mut R| {
            f.families
                .iter()
                .map(|fam| EmbeddingTable::normal(fam.vocab(), config.attr_dim, 0.01, rng))
                .collect::<Vec<_>>()
        };
        let user_tables = tables(&schema.users, rng);
        let item_tables = tables(&schema.items, rng);
        let input = (user_tables.len() + item_tables.len()) * config.attr_dim;
        let dims = [input, config.hidden, config.output];
        let user_tower = Tower::new(&dims, Activation::Identity, rng);
        let item_tower = Tower::new(&dims, Activation::Identity, rng);
        Self {
            user_tables,
            item_tables,
            user_tower,
            item_tower,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            user_tables: self.user_tables.iter().map(EmbeddingTable::zeros_like).collect(),
            item_tables: self.item_tables.iter().map(EmbeddingTable::zeros_like).collect(),
            user_tower: self.user_tower.zeros_like(),
            item_tower: self.item_tower.zeros_like(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.user_tower.output_dim()
    }

    fn tables(&self, kind: EntityKind) -> &[EmbeddingTable] {
        match kind {
            EntityKind::User => &self.user_tables,
            EntityKind::Item => &self.item_tables,
        }
    }

    fn tower(&self, kind: EntityKind) -> &Tower {
        match kind {
            EntityKind::User => &self.user_tower,
            EntityKind::Item => &self.item_tower,
        }
    }

    /// `[own feature embeddings || mean of neighbor feature embeddings]`.
    pub fn feature_input(&self, schema: &FeatureSchema, kind: EntityKind, entity: usize, sequence: &[usize]) -> Result<DVector<f64>> {
        let own = schema.of(kind);
        let other = schema.of(kind.other());
        let slots = own
            .slots
            .get(entity)
            .ok_or_else(|| Error::UnknownEntity(format!("{kind} {entity}")))?;
        let own_tables = self.tables(kind);
        let nb_tables = self.tables(kind.other());
        let dim = own_tables.first().or(nb_tables.first()).map_or(0, EmbeddingTable::dim);
        let mut input = Vec::with_capacity((own_tables.len() + nb_tables.len()) * dim);
        for (table, &slot) in own_tables.iter().zip(slots) {
            input.extend_from_slice(table.row(slot.min(table.rows() - 1)));
        }
        let start = input.len();
        input.resize(start + nb_tables.len() * dim, 0.0);
        if !sequence.is_empty() {
            let inv = 1.0 / sequence.len() as f64;
            for &nb in sequence {
                let nb_slots = other
                    .slots
                    .get(nb)
                    .ok_or_else(|| Error::UnknownEntity(format!("{} {nb}", kind.other())))?;
                for (f, (table, &slot)) in nb_tables.iter().zip(nb_slots).enumerate() {
                    let row = table.row(slot.min(table.rows() - 1));
                    for (k, v) in row.iter().enumerate() {
                        input[start + f * dim + k] += v * inv;
                    }
                }
            }
        }
        Ok(DVector::from_vec(input))
    }

    /// Top embedding of an entity given its features and sequence.
    pub fn represent(&self, schema: &FeatureSchema, kind: EntityKind, entity: usize, sequence: &[usize]) -> Result<DVector<f64>> {
        let input = self.feature_input(schema, kind, entity, sequence)?;
        self.tower(kind).apply(&input)
    }

    fn backprop_input(
        schema: &FeatureSchema,
        kind: EntityKind,
        entity: usize,
        sequence: &[usize],
        grad_input: &DVector<f64>,
        grads: FeatureGrad<'_>,
    ) {
        let dim = grads.own.first().or(grads.neighbor.first()).map_or(0, EmbeddingTable::dim);
        let own_slots = &schema.of(kind).slots[entity];
        for (f, (table, &slot)) in grads.own.iter_mut().zip(own_slots).enumerate() {
            table.add_to_row(slot, &grad_input.as_slice()[f * dim..(f + 1) * dim], 1.0);
        }
        if sequence.is_empty() {
            return;
        }
        let start = grads.own.len() * dim;
        let inv = 1.0 / sequence.len() as f64;
        let other = schema.of(kind.other());
        for &nb in sequence {
            for (f, (table, &slot)) in grads.neighbor.iter_mut().zip(&other.slots[nb]).enumerate() {
                let lo = start + f * dim;
                table.add_to_row(slot, &grad_input.as_slice()[lo..lo + dim], inv);
            }
        }
    }

    /// BPR loss of one `(user, positive, negative)` triple; accumulates
    /// gradients into `grad` when given.
    pub(crate) fn triple_loss(
        &self,
        schema: &FeatureSchema,
        triple: &PretrainTriple<'_>,
        grad: Option<&mut PretrainModel>,
    ) -> Result<f64> {
        let xu = self.feature_input(schema, EntityKind::User, triple.user, triple.user_seq)?;
        let xi = self.feature_input(schema, EntityKind::Item, triple.pos, triple.pos_seq)?;
        let xj = self.feature_input(schema, EntityKind::Item, triple.neg, triple.neg_seq)?;
        let tu = self.user_tower.forward(&xu)?;
        let ti = self.item_tower.forward(&xi)?;
        let tj = self.item_tower.forward(&xj)?;
        let out = |t: &[crate::nn::DenseTrace]| t.last().expect("non-empty").output.clone();
        let (zu, zi, zj) = (out(&tu), out(&ti), out(&tj));
        let bpr = bpr_triple(&zu, &zi, &zj);
        if let Some(grad) = grad {
            let gu = self.user_tower.backward(&tu, &bpr.grad_user, &mut grad.user_tower)?;
            let gi = self.item_tower.backward(&ti, &bpr.grad_pos, &mut grad.item_tower)?;
            let gj = self.item_tower.backward(&tj, &bpr.grad_neg, &mut grad.item_tower)?;
            let PretrainModel {
                user_tables,
                item_tables,
                ..
            } = grad;
            Self::backprop_input(schema, EntityKind::User, triple.user, triple.user_seq, &gu, FeatureGrad {
                own: user_tables,
                neighbor: item_tables,
            });
            Self::backprop_input(schema, EntityKind::Item, triple.pos, triple.pos_seq, &gi, FeatureGrad {
                own: item_tables,
                neighbor: user_tables,
            });
            Self::backprop_input(schema, EntityKind::Item, triple.neg, triple.neg_seq, &gj, FeatureGrad {
                own: item_tables,
                neighbor: user_tables,
            });
        }
        Ok(bpr.loss)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::new(
            "hyper",
            vec![3],
            vec![
                self.user_tables.len() as f64,
                self.item_tables.len() as f64,
                self.user_tower.layers.len() as f64,
            ],
        )];
        for (k, t) in self.user_tables.iter().enumerate() {
            out.push(t.to_tensor(format!("user_feature.{k}")));
        }
        for (k, t) in self.item_tables.iter().enumerate() {
            out.push(t.to_tensor(format!("item_feature.{k}")));
        }
        out.extend(self.user_tower.to_tensors("user_tower"));
        out.extend(self.item_tower.to_tensors("item_tower"));
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let hyper = &Tensor::find(tensors, "hyper")?.data;
        if hyper.len() != 3 {
            return Err(Error::Checkpoint("pretrain `hyper` must have 3 entries".into()));
        }
        let load_tables = |prefix: &str, n: usize| {
            (0..n)
                .map(|k| EmbeddingTable::from_tensor(Tensor::find(tensors, &format!("{prefix}.{k}"))?))
                .collect::<Result<Vec<_>>>()
        };
        let depth = hyper[2] as usize;
        Ok(Self {
            user_tables: load_tables("user_feature", hyper[0] as usize)?,
            item_tables: load_tables("item_feature", hyper[1] as usize)?,
            user_tower: Tower::from_tensors("user_tower", tensors, depth, Activation::Identity)?,
            item_tower: Tower::from_tensors("item_tower", tensors, depth, Activation::Identity)?,
        })
    }
}

pub(crate) struct PretrainTriple<'a> {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
    pub user_seq: &'a [usize],
    pub pos_seq: &'a [usize],
    pub neg_seq: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub best_epoch: usize,
}

fn mean_valid_loss(
    model: &PretrainModel,
    schema: &FeatureSchema,
    sequences: &SequenceStore,
    valid: &[(usize, usize, usize)],
) -> Result<f64> {
    let mut total = 0.0;
    for &(u, i, j) in valid {
        let triple = PretrainTriple {
            user: u,
            pos: i,
            neg: j,
            user_seq: sequences.user_sequence(u),
            pos_seq: sequences.item_sequence(i),
            neg_seq: sequences.item_sequence(j),
        };
        total += model.triple_loss(schema, &triple, None)?;
    }
    Ok(total / valid.len().max(1) as f64)
}

/// Trains both towers with BPR over `(user, positive, sampled negative)`
/// triples. Sequences for a train record are truncated strictly before its
/// timestamp. Keeps the parameters with the best validation loss.
pub fn pretrain(
    train: &[InteractionRecord],
    valid: &[InteractionRecord],
    schema: &FeatureSchema,
    sequences: &SequenceStore,
    sampler: &NegativeSampler,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("pretrain train slice".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = PretrainModel::new(schema, config, &mut rng);
    let mut grad = model.zeros_like();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model);

    let mut valid_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let valid_triples: Vec<(usize, usize, usize)> = valid
        .iter()
        .filter(|r| r.user < sequences.user_count() && r.item < sequences.item_count())
        .map(|r| sampler.sample(r.user, &mut valid_rng).map(|j| (r.user, r.item, j)))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut train_losses = Vec::new();
    let mut valid_losses = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.zero();
            let mut batch_loss = 0.0;
            for &k in batch {
                let r = &train[k];
                let neg = sampler.sample(r.user, &mut rng)?;
                let triple = PretrainTriple {
                    user: r.user,
                    pos: r.item,
                    neg,
                    user_seq: sequences.user_sequence_before(r.user, r.timestamp),
                    pos_seq: sequences.item_sequence_before(r.item, r.timestamp),
                    neg_seq: sequences.item_sequence_before(neg, r.timestamp),
                };
                batch_loss += model.triple_loss(schema, &triple, Some(&mut grad))?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: "pretrain loss is not finite".into(),
                });
            }
            epoch_loss += batch_loss;
            grad.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grad)?;
        }
        if !model.all_finite() {
            return Err(Error::Diverged {
                epoch,
                message: "pretrain parameters are not finite".into(),
            });
        }
        let train_loss = epoch_loss / train.len() as f64;
        train_losses.push(train_loss);
        let valid_loss = if valid_triples.is_empty() {
            train_loss
        } else {
            mean_valid_loss(&model, schema, sequences, &valid_triples)?
        };
        valid_losses.push(valid_loss);
        debug!("pretrain epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        if valid_loss < best.0 {
            best = (valid_loss, epoch, model.clone());
        } else if epoch - best.1 >= config.patience {
            info!("pretrain early stop at epoch {epoch}, best epoch {}", best.1);
            break;
        }
    }
    Ok(PretrainOutcome {
        model: best.2,
        train_losses,
        valid_losses,
        best_epoch: best.1,
    })
}

/// Representation embeddings of all entities of one kind seen in train.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMatrix {
    pub kind: EntityKind,
    /// `N x d`, one row per entity in `entities`.
    pub matrix: DMatrix<f64>,
    pub entities: Vec<usize>,
    /// Timestamp of each entity's latest train interaction.
    pub timestamps: Vec<u64>,
}

impl RepresentationMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.matrix.row(r).iter().copied().collect()
    }

    pub fn row_of(&self, entity: usize) -> Option<usize> {
        self.entities.binary_search(&entity).ok()
    }

    pub fn save(&self, tensor_path: &Path, index_path: &Path) -> Result<()> {
        checkpoint::save(tensor_path, &[Tensor::from_matrix("z", &self.matrix)])?;
        let file = File::create(index_path).map_err(|e| Error::io(index_path, e))?;
        let mut out = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            writeln!(out, "row,{},timestamp", self.kind)?;
            for (r, (e, t)) in self.entities.iter().zip(&self.timestamps).enumerate() {
                writeln!(out, "{r},{e},{t}")?;
            }
            out.flush()
        })();
        res.map_err(|e| Error::io(index_path, e))
    }

    pub fn load(kind: EntityKind, tensor_path: &Path, index_path: &Path) -> Result<Self> {
        let tensors = checkpoint::load(tensor_path)?;
        let matrix = Tensor::find(&tensors, "z")?.to_matrix()?;
        let file = File::open(index_path).map_err(|e| Error::io(index_path, e))?;
        let mut entities = Vec::new();
        let mut timestamps = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(index_path, e))?;
            if n == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<u64>().map_err(|_| Error::Parse {
                    line: n + 1,
                    message: format!("bad number `{s}`"),
                })
            };
            if f.len() != 3 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: "expected row,entity,timestamp".into(),
                });
            }
            entities.push(parse(f[1])? as usize);
            timestamps.push(parse(f[2])?);
        }
        if entities.len() != matrix.nrows() {
            return Err(Error::shape(matrix.nrows(), entities.len()));
        }
        Ok(Self {
            kind,
            matrix,
            entities,
            timestamps,
        })
    }
}

/// One row per entity of `kind` with at least one train interaction, in
/// ascending entity order, computed from its full train sequence.
pub fn export_representations(
    model: &PretrainModel,
    schema: &FeatureSchema,
    sequences: &SequenceStore,
    kind: EntityKind,
) -> Result<RepresentationMatrix> {
    let count = match kind {
        EntityKind::User => sequences.user_count(),
        EntityKind::Item => sequences.item_count(),
    };
    let mut entities = Vec::new();
    let mut timestamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for e in 0..count {
        let (last, seq) = match kind {
            EntityKind::User => (sequences.user_last_time(e), sequences.user_sequence(e)),
            EntityKind::Item => (sequences.item_last_time(e), sequences.item_sequence(e)),
        };
        let Some(last) = last else { continue };
        let z = model.represent(schema, kind, e, seq)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("representation of {kind} {e}")));
        }
        rows.extend(z.iter());
        entities.push(e);
        timestamps.push(last);
    }
    let d = model.output_dim();
    Ok(RepresentationMatrix {
        kind,
        matrix: DMatrix::from_row_slice(entities.len(), d, &rows),
        entities,
        timestamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_sequences;
    use crate::nn::{grad_check_coords, GRAD_CHECK_STEP};

    fn rec(user: usize, item: usize, timestamp: u64) -> InteractionRecord {
        InteractionRecord {
            user,
            item,
            rating: 5,
            timestamp,
        }
    }

    fn genre_table(genres: &[&str]) -> AttributeTable {
        AttributeTable {
            families: vec!["genre".into()],
            values: genres.iter().map(|g| vec![(!g.is_empty()).then(|| g.to_string())]).collect(),
        }
    }

    fn small_world() -> (Vec<InteractionRecord>, SequenceStore, FeatureSchema) {
        let train = vec![rec(0, 0, 1), rec(0, 1, 2), rec(1, 2, 3), rec(1, 3, 4), rec(2, 0, 5), rec(2, 1, 6)];
        let seqs = build_sequences(&train, 4, 5, 50).unwrap();
        let schema = FeatureSchema::build(&AttributeTable::empty(4), &genre_table(&["a", "a", "b", "b", ""]), &seqs);
        (train, seqs, schema)
    }

    #[test]
    fn schema_slots() {
        let (_, seqs, schema) = small_world();
        assert_eq!(schema.items.families.len(), 2);
        assert_eq!(schema.items.slots[0][0], schema.items.slots[1][0]);
        assert_eq!(schema.items.slots[4][0], 0);
        assert_eq!(schema.users.families[0].name, "activity");
        // item 4 never interacted: bucket 0
        assert_eq!(schema.items.slots[4][1], 1);
        assert_eq!(seqs.item_activity(4), 0);
        assert_eq!(activity_bucket(0, 10), 0);
        assert_eq!(activity_bucket(10, 10), 9);
    }

    #[test]
    fn feature_input_blocks() {
        let (_, seqs, schema) = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = PretrainConfig::default();
        let model = PretrainModel::new(&schema, &config, &mut rng);
        // user features: 1 own family, 2 item families
        let x = model.feature_input(&schema, EntityKind::User, 3, &[]).unwrap();
        assert_eq!(x.len(), 48);
        assert_eq!(&x.as_slice()[..16], model.user_tables[0].row(schema.users.slots[3][0]));
        assert!(x.as_slice()[16..].iter().all(|&v| v == 0.0));

        // items 0 and 1 share genre and popularity bucket
        assert_eq!(schema.items.slots[0], schema.items.slots[1]);
        let one = model.feature_input(&schema, EntityKind::User, 0, &[0]).unwrap();
        let two = model.feature_input(&schema, EntityKind::User, 0, &[0, 1]).unwrap();
        assert_eq!(one, two);

        let seq = [0usize, 2, 3, 1, 4];
        let x = model.feature_input(&schema, EntityKind::User, 0, &seq).unwrap();
        for f in 0..2 {
            for k in 0..16 {
                let mean: f64 = seq.iter().map(|&i| model.item_tables[f].row(schema.items.slots[i][f])[k]).sum::<f64>() / 5.0;
                assert!((x[16 + f * 16 + k] - mean).abs() < 1e-15);
            }
        }
        let _ = seqs;
    }

    #[test]
    fn triple_gradients_match_differences() {
        let (_, seqs, schema) = small_world();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = PretrainConfig {
                attr_dim: 4,
                hidden: 8,
                output: 6,
                ..PretrainConfig::default()
            };
            let mut model = PretrainModel::new(&schema, &config, &mut rng);
            // larger features so gradients are well above finite-difference noise
            for t in model.user_tables.iter_mut().chain(model.item_tables.iter_mut()) {
                *t = EmbeddingTable::normal(t.rows(), t.dim(), 0.8, &mut rng);
            }
            let triple = PretrainTriple {
                user: 0,
                pos: 1,
                neg: 2,
                user_seq: seqs.user_sequence(0),
                pos_seq: seqs.item_sequence(1),
                neg_seq: &[1, 2],
            };
            let mut grad = model.zeros_like();
            model.triple_loss(&schema, &triple, Some(&mut grad)).unwrap();
            let n_tensors = model.tensors().len();
            for t in 0..n_tensors {
                let point = model.tensors()[t].to_vec();
                let analytic = grad.tensors()[t].to_vec();
                let f = |p: &[f64]| {
                    let mut m = model.clone();
                    m.tensors_mut()[t].copy_from_slice(p);
                    m.triple_loss(&schema, &triple, None).unwrap()
                };
                let coords: Vec<usize> = (0..point.len()).step_by(1 + point.len() / 40).collect();
                let err = grad_check_coords(f, &point, &analytic, GRAD_CHECK_STEP, Some(&coords));
                assert!(err <= 1e-4, "seed {seed} tensor {t}: {err}");
            }
            let _ = &mut model;
        }
    }

    #[test]
    fn smoke_training_and_determinism() {
        let (train, seqs, schema) = small_world();
        let sampler = NegativeSampler::new(&train, 4, 5);
        let config = PretrainConfig {
            epochs: 1,
            seed: 3,
            ..PretrainConfig::default()
        };
        let a = pretrain(&train, &train[..2], &schema, &seqs, &sampler, &config).unwrap();
        assert!(a.train_losses.iter().all(|l| l.is_finite()));
        assert!(a.model.all_finite());
        let b = pretrain(&train, &train[..2], &schema, &seqs, &sampler, &config).unwrap();
        assert_eq!(a.model, b.model);
        let restored = PretrainModel::from_tensors(&a.model.to_tensors()).unwrap();
        assert_eq!(restored, a.model);
    }

    #[test]
    fn separable_features_beat_random_loss() {
        // two genres; users only ever pick items of "their" genre
        let n_users = 40;
        let n_items = 20;
        let mut train = Vec::new();
        let mut t = 0;
        for round in 0..6 {
            for u in 0..n_users {
                let g = u % 2;
                let item = (2 * ((u + round * 3) % 10) + g) % n_items;
                train.push(rec(u, item, t));
                t += 1;
            }
        }
        let genres: Vec<&str> = (0..n_items).map(|i| if i % 2 == 0 { "even" } else { "odd" }).collect();
        let seqs = build_sequences(&train, n_users, n_items, 50).unwrap();
        let schema = FeatureSchema::build(&AttributeTable::empty(n_users), &genre_table(&genres), &seqs);
        let sampler = NegativeSampler::new(&train, n_users, n_items);
        let config = PretrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-2,
            patience: 60,
            ..PretrainConfig::default()
        };
        let out = pretrain(&train, &[], &schema, &seqs, &sampler, &config).unwrap();
        let last = *out.train_losses.last().unwrap();
        assert!(last < std::f64::consts::LN_2, "{:?}", out.train_losses);
    }

    #[test]
    fn export_shapes_and_recompute() {
        let (_, seqs, schema) = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = PretrainModel::new(&schema, &PretrainConfig::default(), &mut rng);
        let users = export_representations(&model, &schema, &seqs, EntityKind::User).unwrap();
        assert_eq!(users.matrix.shape(), (3, 64));
        assert_eq!(users.entities, vec![0, 1, 2]);
        assert_eq!(users.timestamps, vec![2, 4, 6]);
        // users 0 and 2 share activity bucket and item sequence (0, 1)
        assert_eq!(users.row(0), users.row(2));
        let items = export_representations(&model, &schema, &seqs, EntityKind::Item).unwrap();
        assert_eq!(items.entities, vec![0, 1, 2, 3]);
        for (r, &e) in items.entities.iter().enumerate() {
            let input = model.feature_input(&schema, EntityKind::Item, e, seqs.item_sequence(e)).unwrap();
            let mut x = input;
            for layer in &model.item_tower.layers {
                x = layer.apply(&x).unwrap();
            }
            let diff = items.row(r).iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert_eq!(diff, 0.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let (tp, ip) = (dir.path().join("z.dqv"), dir.path().join("z.csv"));
        items.save(&tp, &ip).unwrap();
        assert_eq!(RepresentationMatrix::load(EntityKind::Item, &tp, &ip).unwrap(), items);
    }
}
