//! Stage orchestration with on-disk artifacts.
//!
//! Each stage writes into `<root>/<stage>-<fingerprint prefix>/` and marks
//! completion with a `DONE` file, so reruns skip finished stages and runs
//! that differ only in downstream keys share upstream artifacts.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Stage};
use crate::context::{KindArtifacts, SemanticContext};
use crate::data::{
    binarize, build_sequences, load_attributes, load_interactions, parse_attributes, read_records, split_chronological, write_records,
    AttributeTable, EntityKind, IdMap, InteractionRecord, LoadOptions, NegativeSampler, SequenceStore,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, PopularityScorer, RandomScorer};
use crate::index::{build_neighbor_cache, build_rep_store, NeighborCache, QuantizedRep, RepStore};
use crate::pretrain::{export_representations, pretrain, FeatureSchema, PretrainConfig, PretrainModel, RepresentationMatrix};
use crate::quantizer::{fit_quantizer, CodebookConfig, QuantizationLosses, QuantizerModel};
use crate::recommender::{train, write_history, ModelScorer, RecConfig, RecModel, TrainInputs};
use crate::synthetic::{generate, SyntheticConfig};
use crate::checkpoint;

const DONE: &str = "DONE";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Binarized, split interactions with attributes in index space.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub users: IdMap,
    pub items: IdMap,
    pub train: Vec<InteractionRecord>,
    pub valid: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub user_attributes: AttributeTable,
    pub item_attributes: AttributeTable,
}

impl Prepared {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.user_count(),
            EntityKind::Item => self.item_count(),
        }
    }

    pub fn ids(&self, kind: EntityKind) -> &IdMap {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub fn attributes(&self, kind: EntityKind) -> &AttributeTable {
        match kind {
            EntityKind::User => &self.user_attributes,
            EntityKind::Item => &self.item_attributes,
        }
    }

    pub fn sequences(&self, max_seq_len: usize) -> Result<SequenceStore> {
        build_sequences(&self.train, self.user_count(), self.item_count(), max_seq_len)
    }

    /// Positives over the whole binarized log.
    pub fn known(&self) -> NegativeSampler {
        let all: Vec<InteractionRecord> = self.train.iter().chain(&self.valid).chain(&self.test).copied().collect();
        NegativeSampler::new(&all, self.user_count(), self.item_count())
    }

    pub fn train_sampler(&self) -> NegativeSampler {
        NegativeSampler::new(&self.train, self.user_count(), self.item_count())
    }
}

fn rekey_attributes(table: &AttributeTable, from: &IdMap, to: &IdMap) -> AttributeTable {
    let width = table.families.len();
    let values = (0..to.len())
        .map(|ix| {
            to.external(ix)
                .and_then(|ext| from.get(ext))
                .and_then(|old| table.values.get(old).cloned())
                .unwrap_or_else(|| vec![None; width])
        })
        .collect();
    AttributeTable {
        families: table.families.clone(),
        values,
    }
}

fn write_attributes(path: &Path, table: &AttributeTable, ids: &IdMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        let mut header = vec!["entity".to_string()];
        header.extend(table.families.iter().cloned());
        writeln!(out, "{}", header.join("\t"))?;
        for (ix, ext) in ids.iter() {
            let mut row = vec![ext.to_string()];
            row.extend(table.values[ix].iter().map(|v| v.clone().unwrap_or_default()));
            writeln!(out, "{}", row.join("\t"))?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn read_attributes(path: &Path, ids: &IdMap) -> Result<AttributeTable> {
    let opts = LoadOptions {
        delimiter: "\t".into(),
        has_header: true,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_attributes(BufReader::new(file), &opts, ids)
}

pub fn prepare_data(config: &RunConfig) -> Result<Prepared> {
    let opts = LoadOptions {
        delimiter: config.delimiter(),
        has_header: config.header,
    };
    let (raw, raw_items) = if config.dataset == "synthetic" {
        let data = generate(&SyntheticConfig {
            groups: config.synth_groups,
            users: config.synth_users,
            items: config.synth_items,
            p_in: config.synth_p_in,
            p_out: config.synth_p_out,
            noise_per_user: config.synth_noise,
            genre_accuracy: config.synth_genre_accuracy,
            seed: config.synth_seed,
        })?;
        (data.log, Some(data.item_attributes))
    } else {
        (load_interactions(Path::new(&config.dataset), &opts)?, None)
    };
    let log = binarize(&raw, config.threshold as u8)?;
    let split = split_chronological(&log.records, config.split)?;
    let load = |path: &Option<String>, ids: &IdMap| match path {
        Some(p) => load_attributes(Path::new(p), &opts, ids),
        None => Ok(AttributeTable::empty(ids.len())),
    };
    let item_attributes = match raw_items {
        Some(table) if config.item_attributes.is_none() => rekey_attributes(&table, &raw.items, &log.items),
        _ => load(&config.item_attributes, &log.items)?,
    };
    Ok(Prepared {
        user_attributes: load(&config.user_attributes, &log.users)?,
        item_attributes,
        users: log.users,
        items: log.items,
        train: split.train,
        valid: split.valid,
        test: split.test,
    })
}

/// First-stage outputs of the feature-only towers.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: PretrainModel,
    pub users: RepresentationMatrix,
    pub items: RepresentationMatrix,
}

impl Pretrained {
    pub fn reps(&self, kind: EntityKind) -> &RepresentationMatrix {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }
}

/// Metrics of the trained model and two reference scorers on the test slice.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub model: MetricsReport,
    pub popularity: MetricsReport,
    pub random: MetricsReport,
}

fn write_metrics(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    let mut text = format!("scorer,{}\n", outcome.model.csv_header());
    for (name, r) in [("model", &outcome.model), ("popularity", &outcome.popularity), ("random", &outcome.random)] {
        text.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    write_text(path, &text)
}

fn read_metrics(path: &Path) -> Result<EvalOutcome> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
    let header: Vec<&str> = lines.first().map(|l| l.split(',').collect()).unwrap_or_default();
    let ks: Vec<usize> = header.iter().filter_map(|h| h.strip_prefix("recall@")).filter_map(|k| k.parse().ok()).collect();
    let parse_row = |n: usize| -> Result<MetricsReport> {
        let bad = |m: &str| Error::Parse {
            line: n + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = lines.get(n).ok_or_else(|| bad("missing row"))?.split(',').collect();
        if f.len() != 5 + 2 * ks.len() {
            return Err(bad("wrong column count"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        Ok(MetricsReport {
            ks: ks.clone(),
            fingerprint: f[1].to_string(),
            samples: f[2].parse().map_err(|_| bad("bad count"))?,
            skipped: f[3].parse().map_err(|_| bad("bad count"))?,
            recall: f[4..4 + ks.len()].iter().map(|s| num(s)).collect::<Result<_>>()?,
            ndcg: f[4 + ks.len()..4 + 2 * ks.len()].iter().map(|s| num(s)).collect::<Result<_>>()?,
            seconds: num(f[4 + 2 * ks.len()])?,
        })
    };
    Ok(EvalOutcome {
        model: parse_row(1)?,
        popularity: parse_row(2)?,
        random: parse_row(3)?,
    })
}

fn write_losses(path: &Path, losses: &[(EntityKind, QuantizationLosses, usize)]) -> Result<()> {
    let mut text = String::from("kind,reconstruction,commitment,total,reseeded\n");
    for (kind, l, reseeded) in losses {
        text.push_str(&format!("{kind},{},{},{},{reseeded}\n", l.reconstruction, l.commitment, l.total));
    }
    write_text(path, &text)
}

pub struct Pipeline {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Pipeline {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, root: root.into() })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        let fp = self.config.fingerprint(stage);
        self.root.join(format!("{stage}-{}", &fp[..12]))
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join(DONE).is_file()
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.join(DONE).is_file() {
            Ok(dir)
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name(),
                path: dir,
            })
        }
    }

    /// Runs `stage` unless it already completed (or `force`). The previous
    /// stage must have completed.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if !force && self.is_done(stage) {
            info!("[{stage}] reusing {}", dir.display());
            return Ok(dir);
        }
        if let Some(prev) = Stage::ALL.iter().position(|&s| s == stage).and_then(|p| p.checked_sub(1)) {
            self.require(Stage::ALL[prev])?;
        }
        create_dir(&dir)?;
        let _ = fs::remove_file(dir.join(DONE));
        info!("[{stage}] running into {}", dir.display());
        match stage {
            Stage::Prepare => self.do_prepare(&dir)?,
            Stage::Pretrain => self.do_pretrain(&dir)?,
            Stage::Quantize => self.do_quantize(&dir)?,
            Stage::Index => self.do_index(&dir)?,
            Stage::Train => self.do_train(&dir)?,
            Stage::Eval => self.do_eval(&dir)?,
        }
        write_text(&dir.join("config.txt"), &self.config.render())?;
        write_text(&dir.join(DONE), &self.config.fingerprint(stage))?;
        Ok(dir)
    }

    /// Runs every stage that has not completed yet and returns the metrics.
    pub fn run(&self) -> Result<EvalOutcome> {
        for stage in Stage::ALL {
            self.run_stage(stage, false)?;
        }
        self.load_metrics()
    }

    fn do_prepare(&self, dir: &Path) -> Result<()> {
        let p = prepare_data(&self.config)?;
        p.users.write(&dir.join("users.csv"))?;
        p.items.write(&dir.join("items.csv"))?;
        write_records(&dir.join("train.csv"), &p.train)?;
        write_records(&dir.join("valid.csv"), &p.valid)?;
        write_records(&dir.join("test.csv"), &p.test)?;
        write_attributes(&dir.join("user_attributes.tsv"), &p.user_attributes, &p.users)?;
        write_attributes(&dir.join("item_attributes.tsv"), &p.item_attributes, &p.items)?;
        info!(
            "[prepare] {} users, {} items, {}/{}/{} train/valid/test",
            p.user_count(),
            p.item_count(),
            p.train.len(),
            p.valid.len(),
            p.test.len()
        );
        Ok(())
    }

    pub fn load_prepared(&self) -> Result<Prepared> {
        let dir = self.require(Stage::Prepare)?;
        let users = IdMap::read(&dir.join("users.csv"))?;
        let items = IdMap::read(&dir.join("items.csv"))?;
        Ok(Prepared {
            user_attributes: read_attributes(&dir.join("user_attributes.tsv"), &users)?,
            item_attributes: read_attributes(&dir.join("item_attributes.tsv"), &items)?,
            train: read_records(&dir.join("train.csv"))?,
            valid: read_records(&dir.join("valid.csv"))?,
            test: read_records(&dir.join("test.csv"))?,
            users,
            items,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let c = &self.config;
        PretrainConfig {
            attr_dim: c.attr_dim,
            hidden: c.pretrain_hidden,
            output: c.dim,
            epochs: c.pretrain_epochs,
            batch_size: c.pretrain_batch,
            lr: c.pretrain_lr,
            patience: c.pretrain_patience,
            seed: c.seed,
        }
    }

    fn schema(&self, p: &Prepared, sequences: &SequenceStore) -> FeatureSchema {
        FeatureSchema::build(&p.user_attributes, &p.item_attributes, sequences)
    }

    fn do_pretrain(&self, dir: &Path) -> Result<()> {
        let p = self.load_prepared()?;
        let sequences = p.sequences(self.config.max_seq_len)?;
        let schema = self.schema(&p, &sequences);
        let out = pretrain(&p.train, &p.valid, &schema, &sequences, &p.train_sampler(), &self.pretrain_config())?;
        let mut history = String::from("epoch,train_loss,valid_loss\n");
        for (e, (t, v)) in out.train_losses.iter().zip(&out.valid_losses).enumerate() {
            history.push_str(&format!("{e},{t},{v}\n"));
        }
        write_text(&dir.join("history.csv"), &history)?;
        checkpoint::save(&dir.join("pretrain.dqv"), &out.model.to_tensors())?;
        for kind in [EntityKind::User, EntityKind::Item] {
            let reps = export_representations(&out.model, &schema, &sequences, kind)?;
            reps.save(&dir.join(format!("{kind}_reps.dqv")), &dir.join(format!("{kind}_reps.csv")))?;
        }
        info!("[pretrain] best epoch {}", out.best_epoch);
        Ok(())
    }

    pub fn load_pretrained(&self) -> Result<Pretrained> {
        let dir = self.require(Stage::Pretrain)?;
        let load = |kind: EntityKind| {
            RepresentationMatrix::load(kind, &dir.join(format!("{kind}_reps.dqv")), &dir.join(format!("{kind}_reps.csv")))
        };
        Ok(Pretrained {
            model: PretrainModel::from_tensors(&checkpoint::load(&dir.join("pretrain.dqv"))?)?,
            users: load(EntityKind::User)?,
            items: load(EntityKind::Item)?,
        })
    }

    fn do_quantize(&self, dir: &Path) -> Result<()> {
        let pre = self.load_pretrained()?;
        let c = &self.config;
        let cb = CodebookConfig {
            size: c.codebook_size,
            beta: c.beta,
            epochs: c.vq_epochs,
            batch_size: c.vq_batch,
            lr: c.vq_lr,
        };
        let mut losses = Vec::new();
        let mut histories = Vec::new();
        for (k, kind) in [EntityKind::User, EntityKind::Item].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(1 + k as u64));
            let z = &pre.reps(kind).matrix;
            let (model, training) = fit_quantizer(z, c.layers, kind, &cb, &mut rng)?;
            checkpoint::save(&dir.join(format!("{kind}_quantizer.dqv")), &model.to_tensors())?;
            let l = model.mean_losses(z)?;
            info!("[quantize] {kind}: reconstruction {:.6} total {:.6}", l.reconstruction, l.total);
            losses.push((kind, l, training.reseeded.iter().sum::<usize>()));
            histories.push(training.epoch_losses);
        }
        write_losses(&dir.join("losses.csv"), &losses)?;
        let mut history = String::from("epoch,user_loss,item_loss\n");
        for (e, (u, i)) in histories[0].iter().zip(&histories[1]).enumerate() {
            history.push_str(&format!("{e},{u},{i}\n"));
        }
        write_text(&dir.join("history.csv"), &history)
    }

    pub fn load_quantizer(&self, kind: EntityKind) -> Result<QuantizerModel> {
        let dir = self.require(Stage::Quantize)?;
        QuantizerModel::from_tensors(&checkpoint::load(&dir.join(format!("{kind}_quantizer.dqv")))?)
    }

    /// Mean quantization losses of users and items on their train matrices.
    pub fn quantizer_losses(&self) -> Result<Vec<(EntityKind, QuantizationLosses)>> {
        let path = self.require(Stage::Quantize)?.join("losses.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .skip(1)
            .map(|(n, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Parse {
                    line: n + 1,
                    message: "malformed loss row".into(),
                };
                let kind = match f.first() {
                    Some(&"user") => EntityKind::User,
                    Some(&"item") => EntityKind::Item,
                    _ => return Err(bad()),
                };
                let num = |k: usize| f.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
                Ok((
                    kind,
                    QuantizationLosses {
                        reconstruction: num(1)?,
                        commitment: num(2)?,
                        total: num(3)?,
                    },
                ))
            })
            .collect()
    }

    /// Store of the latest quantized representation of every train entity.
    pub fn rep_store(&self, kind: EntityKind, pre: &Pretrained, quantizer: &QuantizerModel) -> Result<RepStore> {
        let reps = pre.reps(kind);
        Ok(build_rep_store(&reps.entities, quantizer, reps)?.0)
    }

    fn do_index(&self, dir: &Path) -> Result<()> {
        let p = self.load_prepared()?;
        let pre = self.load_pretrained()?;
        let sequences = p.sequences(self.config.max_seq_len)?;
        let schema = self.schema(&p, &sequences);
        let mut ids = String::from("kind,entity,external_id,semantic_id\n");
        for kind in [EntityKind::User, EntityKind::Item] {
            let quantizer = self.load_quantizer(kind)?;
            let store = self.rep_store(kind, &pre, &quantizer)?;
            let cache = build_neighbor_cache(&store, &quantizer, p.count(kind), self.config.k, self.config.k_prime, |e| {
                Ok(pre.model.represent(&schema, kind, e, sequences.sequence(kind, e, None))?.as_slice().to_vec())
            })?;
            cache.write(&dir.join(format!("{kind}_neighbors.csv")))?;
            for entry in &store.entries {
                let e = entry.rep.entity;
                ids.push_str(&format!("{kind},{e},{},{}\n", p.ids(kind).external(e).unwrap_or(""), entry.rep.semantic_id));
            }
            let mean = cache.sets.iter().map(|s| s.all.len()).sum::<usize>() as f64 / cache.sets.len().max(1) as f64;
            info!("[index] {kind}: {} stored, mean |Q_all| {mean:.2}", store.len());
        }
        write_text(&dir.join("semantic_ids.csv"), &ids)
    }

    pub fn load_neighbors(&self, kind: EntityKind, count: usize) -> Result<NeighborCache> {
        let dir = self.require(Stage::Index)?;
        NeighborCache::read(&dir.join(format!("{kind}_neighbors.csv")), kind, count, self.config.layers)
    }

    /// Context source over the frozen first-stage artifacts.
    pub fn context(&self, p: &Prepared) -> Result<SemanticContext> {
        let pre = self.load_pretrained()?;
        let sequences = p.sequences(self.config.max_seq_len)?;
        let schema = self.schema(p, &sequences);
        let kind_artifacts = |kind: EntityKind| -> Result<KindArtifacts> {
            Ok(KindArtifacts {
                quantizer: self.load_quantizer(kind)?,
                neighbors: self.load_neighbors(kind, p.count(kind))?,
            })
        };
        let users = kind_artifacts(EntityKind::User)?;
        let items = kind_artifacts(EntityKind::Item)?;
        Ok(SemanticContext::new(schema, pre.model, sequences, users, items))
    }

    pub fn rec_config(&self) -> RecConfig {
        let c = &self.config;
        RecConfig {
            id_dim: c.embed_dim,
            hidden: c.rec_hidden,
            output: c.rec_output,
            layers: c.layers,
            codebook_size: c.codebook_size,
            init_std: c.rec_init_std,
            epochs: c.epochs,
            batch_size: c.batch,
            lr: c.lr,
            patience: c.patience,
            eval_k: c.valid_k,
            valid_batch: c.valid_batch(),
            seed: c.seed,
            augmentation: c.augmentation(),
        }
    }

    fn do_train(&self, dir: &Path) -> Result<()> {
        let p = self.load_prepared()?;
        let source = self.context(&p)?;
        let (sampler, known) = (p.train_sampler(), p.known());
        let inputs = TrainInputs {
            train: &p.train,
            valid: &p.valid,
            users: p.user_count(),
            items: p.item_count(),
            sampler: &sampler,
            known: &known,
            source: &source,
            checkpoint: Some(dir.join("last.dqv")),
        };
        let config = self.rec_config();
        let out = train(&inputs, &config)?;
        write_history(&dir.join("history.csv"), &out.history, config.eval_k)?;
        out.model.save(&dir.join("model.dqv"))?;
        info!("[train] best epoch {} of {}", out.best_epoch, out.history.len());
        Ok(())
    }

    pub fn load_model(&self) -> Result<RecModel> {
        RecModel::load(&self.require(Stage::Train)?.join("model.dqv"))
    }

    fn do_eval(&self, dir: &Path) -> Result<()> {
        let p = self.load_prepared()?;
        let model = self.load_model()?;
        let source = self.context(&p)?;
        let known = p.known();
        let (batch, ks) = (self.config.eval_batch(), &self.config.eval_ks);
        let fingerprint = self.config.fingerprint(Stage::Eval)[..12].to_string();
        let tag = |mut r: MetricsReport| {
            r.fingerprint = fingerprint.clone();
            r
        };
        let mut scorer = ModelScorer::new(&model, &source);
        let outcome = EvalOutcome {
            model: tag(evaluate(&mut scorer, &p.test, &known, batch, ks)?),
            popularity: tag(evaluate(&mut PopularityScorer::new(&p.train, p.item_count()), &p.test, &known, batch, ks)?),
            random: tag(evaluate(&mut RandomScorer::new(self.config.seed), &p.test, &known, batch, ks)?),
        };
        for (name, r) in [("model", &outcome.model), ("popularity", &outcome.popularity), ("random", &outcome.random)] {
            let cells: Vec<String> = r.ks.iter().zip(&r.recall).map(|(k, v)| format!("R@{k}={v:.4}")).collect();
            info!("[eval] {name}: {} ({} samples, {} skipped)", cells.join(" "), r.samples, r.skipped);
        }
        write_metrics(&dir.join("metrics.csv"), &outcome)
    }

    pub fn load_metrics(&self) -> Result<EvalOutcome> {
        read_metrics(&self.require(Stage::Eval)?.join("metrics.csv"))
    }

    /// Semantic IDs, sequence attribute histograms and pairwise comparisons
    /// for the given external ids.
    pub fn inspect(&self, kind: EntityKind, external: &[String]) -> Result<InspectReport> {
        let p = self.load_prepared()?;
        let pre = self.load_pretrained()?;
        let quantizer = self.load_quantizer(kind)?;
        let store = self.rep_store(kind, &pre, &quantizer)?;
        let sequences = p.sequences(self.config.max_seq_len)?;
        let schema = self.schema(&p, &sequences);
        let other = p.attributes(kind.other());
        let mut entries = Vec::new();
        for ext in external {
            let e = p.ids(kind).get(ext).ok_or_else(|| Error::UnknownEntity(format!("{kind} `{ext}`")))?;
            let seq = sequences.sequence(kind, e, None);
            let rep = match store.get(e) {
                Some(entry) => entry.rep.clone(),
                None => QuantizedRep::new(e, pre.model.represent(&schema, kind, e, seq)?.as_slice(), &quantizer)?,
            };
            let mut hist: Vec<(String, usize)> = Vec::new();
            for &n in seq {
                let label = other
                    .values
                    .get(n)
                    .and_then(|v| v.first().cloned().flatten())
                    .unwrap_or_else(|| "?".into());
                match hist.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, c)) => *c += 1,
                    None => hist.push((label, 1)),
                }
            }
            hist.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            entries.push(InspectEntry {
                external: ext.clone(),
                rep,
                histogram: hist,
            });
        }
        let mut pairs = Vec::new();
        for a in 0..entries.len() {
            for b in a + 1..entries.len() {
                let (x, y) = (&entries[a].rep, &entries[b].rep);
                pairs.push(InspectPair {
                    a,
                    b,
                    overlap: x.semantic_id.overlap(&y.semantic_id),
                    distance: (&x.z_hat - &y.z_hat).norm_squared(),
                });
            }
        }
        Ok(InspectReport {
            kind,
            layers: quantizer.layers(),
            entries,
            pairs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct InspectEntry {
    pub external: String,
    pub rep: QuantizedRep,
    pub histogram: Vec<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct InspectPair {
    pub a: usize,
    pub b: usize,
    pub overlap: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct InspectReport {
    pub kind: EntityKind,
    pub layers: usize,
    pub entries: Vec<InspectEntry>,
    pub pairs: Vec<InspectPair>,
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{},semantic_id,sequence_histogram", self.kind)?;
        for e in &self.entries {
            let hist: Vec<String> = e.histogram.iter().map(|(l, c)| format!("{l}:{c}")).collect();
            writeln!(f, "{},{},{}", e.external, e.rep.semantic_id, hist.join(" "))?;
        }
        if !self.pairs.is_empty() {
            writeln!(f, "\na,b,overlap,distance")?;
            for p in &self.pairs {
                writeln!(
                    f,
                    "{},{},{}/{},{:.6}",
                    self.entries[p.a].external, self.entries[p.b].external, p.overlap, self.layers, p.distance
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    J,
    L,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "K",
            SweepAxis::J => "J",
            SweepAxis::L => "L",
        }
    }

    fn apply(self, config: &mut RunConfig, value: usize) {
        match self {
            SweepAxis::K => config.k = value,
            SweepAxis::J => config.codebook_size = value,
            SweepAxis::L => config.layers = value,
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "K" => Ok(SweepAxis::K),
            "J" => Ok(SweepAxis::J),
            "L" => Ok(SweepAxis::L),
            _ => Err(Error::Invalid(format!("unknown sweep axis `{s}` (K, J or L)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: usize,
    pub outcome: std::result::Result<(EvalOutcome, Vec<(EntityKind, QuantizationLosses)>), String>,
}

/// Runs the pipeline once per value; a failing value yields a failed row.
pub fn sweep(base: &RunConfig, root: &Path, axis: SweepAxis, values: &[usize]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| {
            let mut config = base.clone();
            axis.apply(&mut config, value);
            let outcome = Pipeline::new(config, root)
                .and_then(|p| Ok((p.run()?, p.quantizer_losses()?)))
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("[sweep] {}={value} failed: {e}", axis.name());
            }
            SweepRow { value, outcome }
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, ks: &[usize], rows: &[SweepRow]) -> String {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut header = vec!["axis".to_string(), "value".into(), "status".into()];
    header.extend(ks.iter().map(|k| format!("recall@{k}")));
    header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    header.extend(["user_quant_error".into(), "item_quant_error".into()]);
    let mut out = header.join(",") + "\n";
    for row in rows {
        let mut cells = vec![axis.name().to_string(), row.value.to_string()];
        match &row.outcome {
            Ok((m, losses)) => {
                cells.push("ok".into());
                cells.extend(m.model.recall.iter().map(f64::to_string));
                cells.extend(m.model.ndcg.iter().map(f64::to_string));
                for kind in [EntityKind::User, EntityKind::Item] {
                    let l = losses.iter().find(|(k, _)| *k == kind).map(|(_, l)| l.reconstruction);
                    cells.push(l.map_or(String::new(), |v| v.to_string()));
                }
            }
            Err(e) => {
                cells.push(format!("failed: {}", e.replace(',', ";")));
                cells.extend(std::iter::repeat_n(String::new(), 2 * ks.len() + 2));
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
