//! Entity contexts backed by the frozen first-stage artifacts.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::data::{EntityKind, SequenceStore};
use crate::error::Result;
use crate::index::NeighborCache;
use crate::pretrain::{FeatureSchema, PretrainModel};
use crate::quantizer::{QuantizerModel, SemanticId};
use crate::recommender::{ContextSource, EntityContext};

/// Per kind, a quantizer and the cached neighbor sets.
pub struct KindArtifacts {
    pub quantizer: QuantizerModel,
    pub neighbors: NeighborCache,
}

/// Builds contexts on demand: the sequence is truncated strictly before the
/// sample time, while the semantic ID and the neighbor set are per entity and
/// come from the full train sequence, as stored by the index stage.
pub struct SemanticContext {
    pub schema: FeatureSchema,
    pub pretrain: PretrainModel,
    pub sequences: SequenceStore,
    pub users: KindArtifacts,
    pub items: KindArtifacts,
    cache: RefCell<HashMap<(EntityKind, usize, usize), Rc<EntityContext>>>,
    ids: RefCell<HashMap<(EntityKind, usize), SemanticId>>,
}

impl SemanticContext {
    pub fn new(schema: FeatureSchema, pretrain: PretrainModel, sequences: SequenceStore, users: KindArtifacts, items: KindArtifacts) -> Self {
        Self {
            schema,
            pretrain,
            sequences,
            users,
            items,
            cache: RefCell::new(HashMap::new()),
            ids: RefCell::new(HashMap::new()),
        }
    }

    pub fn artifacts(&self, kind: EntityKind) -> &KindArtifacts {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub fn semantic_id(&self, kind: EntityKind, entity: usize, sequence: &[usize]) -> Result<SemanticId> {
        let z = self.pretrain.represent(&self.schema, kind, entity, sequence)?;
        let quantizer = &self.artifacts(kind).quantizer;
        quantizer.assign(&quantizer.encode(z.as_slice())?)
    }

    /// Semantic ID from the entity's whole train sequence.
    pub fn frozen_id(&self, kind: EntityKind, entity: usize) -> Result<SemanticId> {
        if let Some(id) = self.ids.borrow().get(&(kind, entity)) {
            return Ok(id.clone());
        }
        let id = self.semantic_id(kind, entity, self.sequences.sequence(kind, entity, None))?;
        self.ids.borrow_mut().insert((kind, entity), id.clone());
        Ok(id)
    }
}

impl ContextSource for SemanticContext {
    fn context(&self, kind: EntityKind, entity: usize, before: Option<u64>) -> Result<Rc<EntityContext>> {
        let visible = self.sequences.visible_count(kind, entity, before);
        let key = (kind, entity, visible);
        if let Some(ctx) = self.cache.borrow().get(&key) {
            return Ok(ctx.clone());
        }
        let sequence = self.sequences.sequence(kind, entity, before);
        let ctx = Rc::new(EntityContext {
            entity,
            visible,
            semantic_id: self.frozen_id(kind, entity)?,
            sequence: sequence.to_vec(),
            neighbors: self.artifacts(kind).neighbors.neighbors(entity).to_vec(),
        });
        self.cache.borrow_mut().insert(key, ctx.clone());
        Ok(ctx)
    }
}
