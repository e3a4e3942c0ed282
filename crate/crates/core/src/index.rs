//! Store of quantized representations and explicit/latent pattern-neighbor
//! queries.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::DVector;

use crate::data::EntityKind;
use crate::error::{Error, Result};
use crate::pretrain::RepresentationMatrix;
use crate::quantizer::{squared_distance, Codebook, QuantizerModel, SemanticId};

/// A quantized entity: its per-layer latents, semantic ID and `z_hat`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedRep {
    pub entity: usize,
    pub latents: Vec<DVector<f64>>,
    pub semantic_id: SemanticId,
    pub z_hat: DVector<f64>,
}

impl QuantizedRep {
    pub fn new(entity: usize, z: &[f64], quantizer: &QuantizerModel) -> Result<Self> {
        let latents = quantizer.encode(z)?;
        let semantic_id = quantizer.assign(&latents)?;
        let z_hat = quantizer.decode(&semantic_id)?;
        Ok(Self {
            entity,
            latents,
            semantic_id,
            z_hat,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub rep: QuantizedRep,
    pub timestamp: u64,
}

/// Latest quantized representation of every train entity, ordered by entity.
#[derive(Clone, Debug, PartialEq)]
pub struct RepStore {
    pub kind: EntityKind,
    pub entries: Vec<StoreEntry>,
}

impl RepStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, entity: usize) -> Option<&StoreEntry> {
        self.entries
            .binary_search_by_key(&entity, |e| e.rep.entity)
            .ok()
            .map(|k| &self.entries[k])
    }
}

/// Quantizes the representation row of each listed entity. Entities without
/// a row are skipped; their count is returned alongside the store.
pub fn build_rep_store(
    entities: &[usize],
    quantizer: &QuantizerModel,
    representations: &RepresentationMatrix,
) -> Result<(RepStore, usize)> {
    let mut sorted = entities.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut entries = Vec::with_capacity(sorted.len());
    let mut skipped = 0;
    for e in sorted {
        let Some(row) = representations.row_of(e) else {
            skipped += 1;
            continue;
        };
        entries.push(StoreEntry {
            rep: QuantizedRep::new(e, &representations.row(row), quantizer)?,
            timestamp: representations.timestamps[row],
        });
    }
    if skipped > 0 {
        warn!("{skipped} {} entities have no representation", representations.kind);
    }
    Ok((
        RepStore {
            kind: representations.kind,
            entries,
        },
        skipped,
    ))
}

/// The `k` stored entities closest to `query`, excluding `exclude`. Ties go
/// to the lower entity id.
pub fn explicit_neighbors(query: &[f64], store: &RepStore, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = store
        .entries
        .iter()
        .filter(|e| Some(e.rep.entity) != exclude)
        .map(|e| (squared_distance(query, e.rep.z_hat.as_slice()), e.rep.entity))
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by);
    scored.into_iter().map(|(_, e)| e).collect()
}

/// Nearest codeword to `x` other than `current`, ties to the lower index.
pub fn latent_codeword(x: &[f64], codebook: &Codebook, current: usize) -> Result<usize> {
    if codebook.size() < 2 {
        return Err(Error::Invalid("latent codeword needs at least 2 codewords".into()));
    }
    if x.len() != codebook.dim() {
        return Err(Error::shape(codebook.dim(), x.len()));
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for j in (0..codebook.size()).filter(|&j| j != current) {
        let d = squared_distance(x, codebook.codeword(j));
        if d < best.1 || best.0 == usize::MAX {
            best = (j, d);
        }
    }
    Ok(best.0)
}

/// Semantic ID with layer `layer` swapped to its latent codeword.
pub fn latent_semantic_id(rep: &QuantizedRep, quantizer: &QuantizerModel, layer: usize) -> Result<SemanticId> {
    let mut id = rep.semantic_id.clone();
    id.0[layer] = latent_codeword(rep.latents[layer].as_slice(), &quantizer.codebooks[layer], id.0[layer])?;
    Ok(id)
}

/// Per layer, the `k_prime` stored entities closest to the decode of the
/// layer-swapped semantic ID.
pub fn latent_neighbors(rep: &QuantizedRep, store: &RepStore, quantizer: &QuantizerModel, k_prime: usize) -> Result<Vec<Vec<usize>>> {
    (0..quantizer.layers())
        .map(|l| {
            let z_lat = quantizer.decode(&latent_semantic_id(rep, quantizer, l)?)?;
            Ok(explicit_neighbors(z_lat.as_slice(), store, k_prime, Some(rep.entity)))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborSet {
    pub explicit: Vec<usize>,
    pub latent: Vec<Vec<usize>>,
    /// Explicit ids first, then unseen latent ids in layer order.
    pub all: Vec<usize>,
}

pub fn neighbor_union(entity: usize, explicit: Vec<usize>, latent: Vec<Vec<usize>>) -> NeighborSet {
    let mut seen = HashSet::new();
    seen.insert(entity);
    let all = explicit
        .iter()
        .chain(latent.iter().flatten())
        .copied()
        .filter(|&e| seen.insert(e))
        .collect();
    let keep = |v: Vec<usize>| v.into_iter().filter(|&e| e != entity).collect::<Vec<_>>();
    NeighborSet {
        explicit: keep(explicit),
        latent: latent.into_iter().map(keep).collect(),
        all,
    }
}

pub fn query_neighbors(rep: &QuantizedRep, store: &RepStore, quantizer: &QuantizerModel, k: usize, k_prime: usize) -> Result<NeighborSet> {
    let explicit = explicit_neighbors(rep.z_hat.as_slice(), store, k, Some(rep.entity));
    let latent = latent_neighbors(rep, store, quantizer, k_prime)?;
    Ok(neighbor_union(rep.entity, explicit, latent))
}

/// Neighbor sets for entities `0..entity_count`. Entities missing from the
/// store are quantized from `represent(entity)` and queried the same way.
pub fn build_neighbor_cache<F>(
    store: &RepStore,
    quantizer: &QuantizerModel,
    entity_count: usize,
    k: usize,
    k_prime: usize,
    mut represent: F,
) -> Result<NeighborCache>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if store.is_empty() {
        return Err(Error::Empty(format!("{} store", store.kind)));
    }
    let sets = (0..entity_count)
        .map(|e| match store.get(e) {
            Some(entry) => query_neighbors(&entry.rep, store, quantizer, k, k_prime),
            None => {
                let rep = QuantizedRep::new(e, &represent(e)?, quantizer)?;
                query_neighbors(&rep, store, quantizer, k, k_prime)
            }
        })
        .collect::<Result<_>>()?;
    Ok(NeighborCache { kind: store.kind, sets })
}

/// Neighbor sets of every entity of one kind, indexed by entity.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborCache {
    pub kind: EntityKind,
    pub sets: Vec<NeighborSet>,
}

impl NeighborCache {
    pub fn neighbors(&self, entity: usize) -> &[usize] {
        self.sets.get(entity).map_or(&[], |s| s.all.as_slice())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            writeln!(out, "{},neighbor,origin", self.kind)?;
            for (e, set) in self.sets.iter().enumerate() {
                for n in &set.explicit {
                    writeln!(out, "{e},{n},explicit")?;
                }
                for (l, ids) in set.latent.iter().enumerate() {
                    for n in ids {
                        writeln!(out, "{e},{n},latent:{l}")?;
                    }
                }
            }
            out.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, kind: EntityKind, entity_count: usize, layers: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut explicit = vec![Vec::new(); entity_count];
        let mut latent = vec![vec![Vec::new(); layers]; entity_count];
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 || line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: n + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad("expected entity,neighbor,origin".into()));
            }
            let entity: usize = f[0].parse().map_err(|_| bad(format!("bad entity `{}`", f[0])))?;
            let nb: usize = f[1].parse().map_err(|_| bad(format!("bad neighbor `{}`", f[1])))?;
            if entity >= entity_count || nb >= entity_count {
                return Err(bad(format!("entity out of range ({entity_count})")));
            }
            match f[2].strip_prefix("latent:") {
                None if f[2] == "explicit" => explicit[entity].push(nb),
                Some(l) => {
                    let l: usize = l.parse().ok().filter(|&l| l < layers).ok_or_else(|| bad(format!("bad layer `{l}`")))?;
                    latent[entity][l].push(nb);
                }
                None => return Err(bad(format!("unknown origin `{}`", f[2]))),
            }
        }
        let sets = explicit
            .into_iter()
            .zip(latent)
            .enumerate()
            .map(|(e, (x, l))| neighbor_union(e, x, l))
            .collect();
        Ok(Self { kind, sets })
    }
}
