//! Decomposed quantization of representation embeddings into semantic IDs.
//!
//! The encoder of every layer is a fixed block of right-singular vectors of
//! the centered representation matrix. Blocks are chosen so that each carries
//! a similar share of the total variance (sum of squared singular values),
//! and the transpose of a block is its decoder. Only the per-layer codebooks
//! are learned.

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Tensor;
use crate::data::EntityKind;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, EmbeddingTable, Parameters};

const SVD_MAX_ITERATIONS: usize = 10_000;

/// Codeword index sequence `(c_1, ..., c_L)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId(pub Vec<usize>);

impl SemanticId {
    pub fn layers(&self) -> usize {
        self.0.len()
    }

    /// Number of layers on which both ids pick the same codeword.
    pub fn overlap(&self, other: &SemanticId) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a == b).count()
    }
}

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "<{}>", parts.join("-"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerBasis {
    pub kind: EntityKind,
    pub mean: DVector<f64>,
    /// `d x (d/L)` orthonormal column blocks `W_l`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Singular value of every block column.
    pub sigmas: Vec<Vec<f64>>,
    /// Rows of the matrix the basis was fitted on.
    pub rows: usize,
}

impl QuantizerBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_dim(&self) -> usize {
        self.blocks[0].ncols()
    }

    /// `[W_1 ... W_L]` side by side.
    pub fn stacked(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut w = DMatrix::zeros(d, d);
        let b = self.block_dim();
        for (l, block) in self.blocks.iter().enumerate() {
            w.columns_mut(l * b, b).copy_from(block);
        }
        w
    }

    pub fn block_loads(&self) -> Vec<f64> {
        self.sigmas.iter().map(|s| s.iter().map(|x| x * x).sum()).collect()
    }
}

/// Greedy balanced assignment of `sigma_sq.len()` columns to `layers` blocks
/// of equal size.
///
/// Columns are visited by decreasing `sigma_sq` (ties: lower column first)
/// and each goes to the least-loaded block that still has room (ties: lower
/// block index). Returns the column indices of each block in visit order.
pub fn partition_columns(sigma_sq: &[f64], layers: usize) -> Result<Vec<Vec<usize>>> {
    let d = sigma_sq.len();
    if layers == 0 || !d.is_multiple_of(layers) {
        return Err(Error::Invalid(format!("{d} columns cannot be split into {layers} equal blocks")));
    }
    let size = d / layers;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| sigma_sq[b].total_cmp(&sigma_sq[a]).then(a.cmp(&b)));
    let mut blocks: Vec<Vec<usize>> = vec![Vec::with_capacity(size); layers];
    let mut loads = vec![0.0f64; layers];
    for col in order {
        let target = (0..layers)
            .filter(|&l| blocks[l].len() < size)
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("capacity remains while columns remain");
        blocks[target].push(col);
        loads[target] += sigma_sq[col];
    }
    Ok(blocks)
}

/// `sum over ordered pairs l1 != l2 of |load_l1 - load_l2|`.
pub fn pairwise_imbalance(loads: &[f64]) -> f64 {
    let mut total = 0.0;
    for (a, la) in loads.iter().enumerate() {
        for (b, lb) in loads.iter().enumerate() {
            if a != b {
                total += (la - lb).abs();
            }
        }
    }
    total
}

/// Column means of `z`.
pub fn column_mean(z: &DMatrix<f64>) -> DVector<f64> {
    let n = z.nrows() as f64;
    DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum() / n))
}

/// Centers `z`, takes its SVD and splits the right-singular vectors into
/// `layers` variance-balanced blocks.
pub fn fit_basis(z: &DMatrix<f64>, layers: usize, kind: EntityKind) -> Result<QuantizerBasis> {
    let (n, d) = z.shape();
    if n <= d {
        return Err(Error::Invalid(format!("representation matrix needs more rows than columns, got {n}x{d}")));
    }
    if layers == 0 || d % layers != 0 {
        return Err(Error::Invalid(format!("embedding dim {d} is not divisible by {layers} layers")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("representation matrix".into()));
    }
    let mean = column_mean(z);
    let mut centered = z.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let svd = SVD::try_new(centered, false, true, f64::EPSILON, SVD_MAX_ITERATIONS).ok_or(Error::SvdNoConvergence)?;
    let v_t = svd.v_t.ok_or(Error::SvdNoConvergence)?;
    let sigma = svd.singular_values;
    let sigma_sq: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let assignment = partition_columns(&sigma_sq, layers)?;
    let blocks = assignment
        .iter()
        .map(|cols| DMatrix::from_fn(d, cols.len(), |r, c| v_t[(cols[c], r)]))
        .collect();
    let sigmas = assignment.iter().map(|cols| cols.iter().map(|&c| sigma[c]).collect()).collect();
    Ok(QuantizerBasis {
        kind,
        mean,
        blocks,
        sigmas,
        rows: n,
    })
}

/// Per-layer latents `x_l = (z - mean) W_l`.
pub fn encode(z: &[f64], basis: &QuantizerBasis) -> Result<Vec<DVector<f64>>> {
    if z.len() != basis.dim() {
        return Err(Error::shape(basis.dim(), z.len()));
    }
    let centered = DVector::from_column_slice(z) - &basis.mean;
    Ok(basis.blocks.iter().map(|w| w.tr_mul(&centered)).collect())
}

/// One layer's codewords, `J x (d/L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codewords: EmbeddingTable,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.dim()
    }

    pub fn codeword(&self, j: usize) -> &[f64] {
        self.codewords.row(j)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword to `x` and its squared distance; ties go to the lower
/// index.
pub fn nearest_codeword(x: &[f64], codebook: &Codebook) -> Result<(usize, f64)> {
    if codebook.size() == 0 {
        return Err(Error::Empty("codebook".into()));
    }
    if x.len() != codebook.dim() {
        return Err(Error::shape(codebook.dim(), x.len()));
    }
    let mut best = (0, f64::INFINITY);
    for j in 0..codebook.size() {
        let dist = squared_distance(x, codebook.codeword(j));
        if dist < best.1 {
            best = (j, dist);
        }
    }
    Ok(best)
}

pub fn assign_codewords(latents: &[DVector<f64>], codebooks: &[Codebook]) -> Result<SemanticId> {
    if latents.len() != codebooks.len() {
        return Err(Error::shape(codebooks.len(), latents.len()));
    }
    latents
        .iter()
        .zip(codebooks)
        .map(|(x, cb)| nearest_codeword(x.as_slice(), cb).map(|(j, _)| j))
        .collect::<Result<Vec<_>>>()
        .map(SemanticId)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizationLosses {
    /// `||z_hat - z||^2`
    pub reconstruction: f64,
    /// `sum_l ||x_l - r_l^{c_l}||^2`
    pub commitment: f64,
    /// `reconstruction + beta * commitment`
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerModel {
    pub basis: QuantizerBasis,
    pub codebooks: Vec<Codebook>,
    pub beta: f64,
}

impl QuantizerModel {
    pub fn new(basis: QuantizerBasis, codebooks: Vec<Codebook>, beta: f64) -> Result<Self> {
        if codebooks.len() != basis.layers() {
            return Err(Error::shape(basis.layers(), codebooks.len()));
        }
        if let Some(cb) = codebooks.iter().find(|cb| cb.dim() != basis.block_dim()) {
            return Err(Error::shape(basis.block_dim(), cb.dim()));
        }
        Ok(Self { basis, codebooks, beta })
    }

    pub fn kind(&self) -> EntityKind {
        self.basis.kind
    }

    pub fn layers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn encode(&self, z: &[f64]) -> Result<Vec<DVector<f64>>> {
        encode(z, &self.basis)
    }

    pub fn assign(&self, latents: &[DVector<f64>]) -> Result<SemanticId> {
        assign_codewords(latents, &self.codebooks)
    }

    /// `z_hat = sum_l r_l^{c_l} W_l^T + mean`.
    pub fn decode(&self, id: &SemanticId) -> Result<DVector<f64>> {
        if id.layers() != self.layers() {
            return Err(Error::shape(self.layers(), id.layers()));
        }
        let mut z = self.basis.mean.clone();
        for ((&c, cb), w) in id.0.iter().zip(&self.codebooks).zip(&self.basis.blocks) {
            let r = cb.codewords.checked_row(c)?;
            z.gemv(1.0, w, &DVector::from_column_slice(r), 1.0);
        }
        Ok(z)
    }

    /// Semantic ID and quantized representation of `z`.
    pub fn quantize(&self, z: &[f64]) -> Result<(SemanticId, DVector<f64>)> {
        let id = self.assign(&self.encode(z)?)?;
        let z_hat = self.decode(&id)?;
        Ok((id, z_hat))
    }

    pub fn losses(&self, z: &[f64]) -> Result<QuantizationLosses> {
        let latents = self.encode(z)?;
        let id = self.assign(&latents)?;
        let z_hat = self.decode(&id)?;
        let reconstruction = squared_distance(z_hat.as_slice(), z);
        let commitment = latents
            .iter()
            .zip(&id.0)
            .zip(&self.codebooks)
            .map(|((x, &c), cb)| squared_distance(x.as_slice(), cb.codeword(c)))
            .sum::<f64>();
        Ok(QuantizationLosses {
            reconstruction,
            commitment,
            total: reconstruction + self.beta * commitment,
        })
    }

    /// Mean losses over the rows of `z`.
    pub fn mean_losses(&self, z: &DMatrix<f64>) -> Result<QuantizationLosses> {
        let mut acc = QuantizationLosses {
            reconstruction: 0.0,
            commitment: 0.0,
            total: 0.0,
        };
        for r in 0..z.nrows() {
            let row: Vec<f64> = z.row(r).iter().copied().collect();
            let l = self.losses(&row)?;
            acc.reconstruction += l.reconstruction;
            acc.commitment += l.commitment;
            acc.total += l.total;
        }
        let n = z.nrows().max(1) as f64;
        Ok(QuantizationLosses {
            reconstruction: acc.reconstruction / n,
            commitment: acc.commitment / n,
            total: acc.total / n,
        })
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let b = &self.basis;
        let kind = match b.kind {
            EntityKind::User => 0.0,
            EntityKind::Item => 1.0,
        };
        let mut out = vec![
            Tensor::new(
                "hyper",
                vec![5],
                vec![kind, self.layers() as f64, self.codebook_size() as f64, self.beta, b.rows as f64],
            ),
            Tensor::from_vector("mean", &b.mean),
        ];
        for l in 0..self.layers() {
            out.push(Tensor::from_matrix(format!("block.{l}"), &b.blocks[l]));
            out.push(Tensor::new(format!("sigma.{l}"), vec![b.sigmas[l].len()], b.sigmas[l].clone()));
            out.push(self.codebooks[l].codewords.to_tensor(format!("codebook.{l}")));
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let hyper = &Tensor::find(tensors, "hyper")?.data;
        if hyper.len() != 5 {
            return Err(Error::Checkpoint("quantizer `hyper` must have 5 entries".into()));
        }
        let kind = if hyper[0] == 0.0 { EntityKind::User } else { EntityKind::Item };
        let layers = hyper[1] as usize;
        let mean = Tensor::find(tensors, "mean")?.to_vector()?;
        let mut blocks = Vec::with_capacity(layers);
        let mut sigmas = Vec::with_capacity(layers);
        let mut codebooks = Vec::with_capacity(layers);
        for l in 0..layers {
            blocks.push(Tensor::find(tensors, &format!("block.{l}"))?.to_matrix()?);
            sigmas.push(Tensor::find(tensors, &format!("sigma.{l}"))?.data.clone());
            codebooks.push(Codebook {
                codewords: EmbeddingTable::from_tensor(Tensor::find(tensors, &format!("codebook.{l}"))?)?,
            });
        }
        let basis = QuantizerBasis {
            kind,
            mean,
            blocks,
            sigmas,
            rows: hyper[4] as usize,
        };
        Self::new(basis, codebooks, hyper[3])
    }
}

impl Parameters for Vec<Codebook> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().map(|cb| cb.codewords.as_slice()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|cb| cb.codewords.tensors_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookConfig {
    /// Codewords per layer, `J`.
    pub size: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 128,
            beta: 0.25,
            epochs: 50,
            batch_size: 1024,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CodebookTraining {
    pub codebooks: Vec<Codebook>,
    /// Mean total loss over the training rows after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Dead codewords re-seeded after each epoch.
    pub reseeded: Vec<usize>,
}

fn latent_rows(z: &DMatrix<f64>, basis: &QuantizerBasis) -> Result<Vec<Vec<DVector<f64>>>> {
    (0..z.nrows())
        .map(|r| {
            let row: Vec<f64> = z.row(r).iter().copied().collect();
            encode(&row, basis)
        })
        .collect()
}

/// Picks `size` pairwise-distinct latents of layer `l` as initial codewords.
fn init_codebook<R: Rng + ?Sized>(latents: &[Vec<DVector<f64>>], l: usize, size: usize, rng: &mut R) -> Codebook {
    let dim = latents[0][l].len();
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<&[f64]> = Vec::with_capacity(size);
    for &r in &order {
        let x = latents[r][l].as_slice();
        if !chosen.contains(&x) {
            chosen.push(x);
            if chosen.len() == size {
                break;
            }
        }
    }
    let mut data: Vec<f64> = chosen.iter().flat_map(|c| c.iter().copied()).collect();
    // Fewer distinct latents than codewords: pad with nudged copies.
    let distinct = chosen.len();
    for k in distinct..size {
        let base = chosen[k % distinct];
        let nudge = 1e-6 * (k + 1) as f64;
        data.extend(base.iter().map(|v| v + nudge));
    }
    Codebook {
        codewords: EmbeddingTable::from_rows(size, dim, data).expect("consistent size"),
    }
}

fn initial_codebooks<R: Rng + ?Sized>(latents: &[Vec<DVector<f64>>], size: usize, rng: &mut R) -> Vec<Codebook> {
    (0..latents[0].len()).map(|l| init_codebook(latents, l, size, rng)).collect()
}

/// The codebooks training starts from: per layer, `size` distinct training
/// latents. Training with an identically seeded `rng` begins here.
pub fn starting_codebooks<R: Rng + ?Sized>(z: &DMatrix<f64>, basis: &QuantizerBasis, size: usize, rng: &mut R) -> Result<Vec<Codebook>> {
    if z.nrows() == 0 {
        return Err(Error::Empty("codebook training rows".into()));
    }
    Ok(initial_codebooks(&latent_rows(z, basis)?, size, rng))
}

/// Trains the codebooks of a frozen basis with minibatch Adam on the total
/// quantization loss. `on_epoch` sees the codebooks after every epoch.
pub fn train_codebooks_with<R, F>(
    z: &DMatrix<f64>,
    basis: &QuantizerBasis,
    config: &CodebookConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<CodebookTraining>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[Codebook]),
{
    let n = z.nrows();
    if config.size < 2 {
        return Err(Error::Invalid("codebook size must be at least 2".into()));
    }
    if config.size > n {
        return Err(Error::Invalid(format!("codebook size {} exceeds {n} training rows", config.size)));
    }
    if config.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    if z.ncols() != basis.dim() {
        return Err(Error::shape(basis.dim(), z.ncols()));
    }
    let layers = basis.layers();
    let latents = latent_rows(z, basis)?;
    let mut codebooks = initial_codebooks(&latents, config.size, rng);
    let mut grads: Vec<Codebook> = codebooks
        .iter()
        .map(|cb| Codebook {
            codewords: cb.codewords.zeros_like(),
        })
        .collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &codebooks);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut reseeded = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut usage = vec![vec![0usize; config.size]; layers];
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            for &r in batch {
                let x = &latents[r];
                let id = assign_codewords(x, &codebooks)?;
                // residual of the reconstruction, z_hat - z
                let mut residual = basis.mean.clone();
                for ((&c, cb), w) in id.0.iter().zip(&codebooks).zip(&basis.blocks) {
                    residual.gemv(1.0, w, &DVector::from_column_slice(cb.codeword(c)), 1.0);
                }
                for (k, v) in residual.iter_mut().enumerate() {
                    *v -= z[(r, k)];
                }
                for (l, &c) in id.0.iter().enumerate() {
                    usage[l][c] += 1;
                    let from_recon = basis.blocks[l].tr_mul(&residual);
                    let codeword = codebooks[l].codeword(c);
                    let g: Vec<f64> = (0..codeword.len())
                        .map(|k| 2.0 * from_recon[k] + 2.0 * config.beta * (codeword[k] - x[l][k]))
                        .collect();
                    grads[l].codewords.add_to_row(c, &g, scale);
                }
            }
            adam.step(&mut codebooks, &grads)?;
        }

        let mut count = 0;
        for l in 0..layers {
            for j in 0..config.size {
                if usage[l][j] > 0 {
                    continue;
                }
                let r = rng.random_range(0..n);
                let mut fresh: Vec<f64> = latents[r][l].iter().copied().collect();
                let cb = &codebooks[l];
                if (0..config.size).any(|k| k != j && cb.codeword(k) == fresh.as_slice()) {
                    fresh.iter_mut().for_each(|v| *v += 1e-6);
                }
                codebooks[l].codewords.row_mut(j).copy_from_slice(&fresh);
                let dim = fresh.len();
                adam.m[l][j * dim..(j + 1) * dim].fill(0.0);
                adam.v[l][j * dim..(j + 1) * dim].fill(0.0);
                count += 1;
            }
        }
        reseeded.push(count);

        let mut total = 0.0;
        for (r, x) in latents.iter().enumerate() {
            let id = assign_codewords(x, &codebooks)?;
            let mut z_hat = basis.mean.clone();
            let mut commit = 0.0;
            for (l, &c) in id.0.iter().enumerate() {
                let cw = codebooks[l].codeword(c);
                z_hat.gemv(1.0, &basis.blocks[l], &DVector::from_column_slice(cw), 1.0);
                commit += squared_distance(x[l].as_slice(), cw);
            }
            let recon: f64 = (0..z.ncols()).map(|k| (z_hat[k] - z[(r, k)]).powi(2)).sum();
            total += recon + config.beta * commit;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: "codebook loss is not finite".into(),
            });
        }
        epoch_losses.push(mean);
        on_epoch(epoch, &codebooks);
    }
    Ok(CodebookTraining {
        codebooks,
        epoch_losses,
        reseeded,
    })
}

pub fn train_codebooks<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    basis: &QuantizerBasis,
    config: &CodebookConfig,
    rng: &mut R,
) -> Result<CodebookTraining> {
    train_codebooks_with(z, basis, config, rng, |_, _| {})
}

/// Fits the basis and trains codebooks in one go.
pub fn fit_quantizer<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    layers: usize,
    kind: EntityKind,
    config: &CodebookConfig,
    rng: &mut R,
) -> Result<(QuantizerModel, CodebookTraining)> {
    let basis = fit_basis(z, layers, kind)?;
    let training = train_codebooks(z, &basis, config, rng)?;
    let model = QuantizerModel::new(basis, training.codebooks.clone(), config.beta)?;
    Ok((model, training))
}
