//! Embedding → linear → softmax language model with closed-form gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::{combined_loss, cross_entropy, kl_divergence, DistMatrix, GoldLabels, DEFAULT_CLAMP};
use crate::scalar::Element;
use crate::tensor::{Checkpoint, Tensor};

use super::data::DialogueSample;
use super::TrainError;

pub const EMBED: &str = "embed";
pub const OUT: &str = "out";

/// Parameters: `embed` is `V × d`, `out` is `d × V`, both row-major. Position
/// `i` predicts a distribution from `embed[token_i] · out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm<T> {
    vocab_size: usize,
    dim: usize,
    embed: Vec<T>,
    out: Vec<T>,
}

/// Loss of one sample under the combined objective, with its gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub clm: f64,
    pub fusion: f64,
    /// Same names and shapes as the model parameters.
    pub grads: Checkpoint,
}

/// Next-token labels: row `i` is scored against token `i + 1` and counts only
/// when that token is an assistant token. The final row never counts.
pub fn shifted_labels(sample: &DialogueSample) -> GoldLabels {
    let n = sample.len();
    let mut token_ids = vec![0; n];
    let mut loss_mask = vec![false; n];
    if n > 0 {
        token_ids[..n - 1].copy_from_slice(&sample.token_ids[1..]);
        loss_mask[..n - 1].copy_from_slice(&sample.role_mask[1..]);
    }
    GoldLabels { token_ids, loss_mask }
}

impl<T: Element> ToyLm<T> {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        ToyLm {
            vocab_size,
            dim,
            embed: vec![T::zero(); vocab_size * dim],
            out: vec![T::zero(); dim * vocab_size],
        }
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab_size: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::narrow(rng.gen_range(-scale..=scale))).collect()
        };
        let embed = draw(vocab_size * dim);
        let out = draw(dim * vocab_size);
        ToyLm { vocab_size, dim, embed, out }
    }

    pub fn from_parts(vocab_size: usize, dim: usize, embed: Vec<T>, out: Vec<T>) -> Result<Self, TrainError> {
        if embed.len() != vocab_size * dim || out.len() != dim * vocab_size {
            return Err(TrainError::ShapeMismatch(format!(
                "parameters do not match V={vocab_size}, d={dim}"
            )));
        }
        Ok(ToyLm { vocab_size, dim, embed, out })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| TrainError::ShapeMismatch(format!("model checkpoint lacks `{name}`")))
        };
        let (embed, out) = (get(EMBED)?, get(OUT)?);
        let (&[v, d], &[d2, v2]) = (embed.shape(), out.shape()) else {
            return Err(TrainError::ShapeMismatch("model tensors must be 2-D".into()));
        };
        if v != v2 || d != d2 {
            return Err(TrainError::ShapeMismatch(format!(
                "embed is {v}x{d} but out is {d2}x{v2}"
            )));
        }
        let typed = |t: &Tensor| {
            t.as_slice::<T>().map(<[T]>::to_vec).ok_or_else(|| {
                TrainError::ShapeMismatch(format!("model tensors must be {}", T::DTYPE))
            })
        };
        Self::from_parts(v, d, typed(embed)?, typed(out)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new()
            .with_tensor(EMBED, Tensor::new(vec![self.vocab_size, self.dim], self.embed.clone()).unwrap())
            .with_tensor(OUT, Tensor::new(vec![self.dim, self.vocab_size], self.out.clone()).unwrap())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self) -> &[T] {
        &self.embed
    }

    pub fn out(&self) -> &[T] {
        &self.out
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), TrainError> {
        match ids.iter().find(|&&id| id >= self.vocab_size) {
            Some(&id) => Err(TrainError::TokenOutOfRange { id, vocab: self.vocab_size }),
            None => Ok(()),
        }
    }

    fn logits(&self, ids: &[usize]) -> Vec<f64> {
        let (v_n, d_n) = (self.vocab_size, self.dim);
        let mut logits = vec![0.0f64; ids.len() * v_n];
        for (i, &id) in ids.iter().enumerate() {
            let e = &self.embed[id * d_n..(id + 1) * d_n];
            let row = &mut logits[i * v_n..(i + 1) * v_n];
            for (k, &ek) in e.iter().enumerate() {
                let ek = ek.widen();
                for (z, &o) in row.iter_mut().zip(&self.out[k * v_n..(k + 1) * v_n]) {
                    *z += ek * o.widen();
                }
            }
        }
        logits
    }

    /// Next-token distributions for every position of `ids`.
    pub fn forward(&self, ids: &[usize]) -> Result<DistMatrix<T>, TrainError> {
        self.check_ids(ids)?;
        Ok(DistMatrix::softmax(ids.len(), self.vocab_size, &self.logits(ids)))
    }

    /// Combined CLM + fusion loss of one sample and its exact gradient.
    ///
    /// Without `p_fused` the objective is plain CLM regardless of `lambda`.
    /// Both terms average over the rows whose next token is an assistant
    /// token. Gradients flow through the probability clamp exactly: clamped
    /// probabilities contribute no gradient.
    pub fn loss_and_grads(
        &self,
        sample: &DialogueSample,
        p_fused: Option<&DistMatrix<T>>,
        lambda: f64,
    ) -> Result<Evaluation, TrainError> {
        let ids = &sample.token_ids;
        if sample.role_mask.len() != ids.len() {
            return Err(TrainError::ShapeMismatch("role mask length differs from tokens".into()));
        }
        self.check_ids(ids)?;
        let (v_n, d_n) = (self.vocab_size, self.dim);
        if let Some(p) = p_fused {
            if p.shape() != (ids.len(), v_n) {
                return Err(TrainError::ShapeMismatch(format!(
                    "fused distribution is {:?}, model output is {:?}",
                    p.shape(),
                    (ids.len(), v_n)
                )));
            }
        }
        let q64: DistMatrix<f64> = DistMatrix::softmax(ids.len(), v_n, &self.logits(ids));
        let labels = shifted_labels(sample);
        let clm = cross_entropy(&q64, &labels, DEFAULT_CLAMP)?;
        let p64 = p_fused.map(DistMatrix::cast::<f64>);
        let (fusion, loss, clm_weight) = match &p64 {
            Some(p) => {
                let fusion = kl_divergence(&q64, p, &labels.loss_mask, DEFAULT_CLAMP)?;
                (fusion, combined_loss(clm, fusion, lambda)?, lambda)
            }
            None => (0.0, clm, 1.0),
        };

        let active = labels.active();
        let mut g_embed = vec![0.0f64; v_n * d_n];
        let mut g_out = vec![0.0f64; d_n * v_n];
        if active > 0 {
            let inv = 1.0 / active as f64;
            let mut g = vec![0.0f64; v_n];
            for i in (0..ids.len()).filter(|&i| labels.loss_mask[i]) {
                let q = q64.row(i);
                let gold = labels.token_ids[i];
                g.iter_mut().for_each(|x| *x = 0.0);
                // d/dz of −log q_gold is q − onehot(gold), unless the clamp is active.
                if q[gold] >= DEFAULT_CLAMP && clm_weight != 0.0 {
                    let w = clm_weight * inv;
                    for (gv, &qv) in g.iter_mut().zip(q) {
                        *gv += w * qv;
                    }
                    g[gold] -= w;
                }
                // d/dz of −Σ_v P_v log max(q_v, c) is q_w·S − P_w·[q_w ≥ c],
                // with S the teacher mass on unclamped entries.
                if let Some(p) = &p64 {
                    let w = (1.0 - lambda) * inv;
                    if w != 0.0 {
                        let p = p.row(i);
                        let s: f64 = q
                            .iter()
                            .zip(p)
                            .filter(|(&qv, _)| qv >= DEFAULT_CLAMP)
                            .map(|(_, &pv)| pv)
                            .sum();
                        for ((gv, &qv), &pv) in g.iter_mut().zip(q).zip(p) {
                            let own = if qv >= DEFAULT_CLAMP { pv } else { 0.0 };
                            *gv += w * (qv * s - own);
                        }
                    }
                }
                let id = ids[i];
                for k in 0..d_n {
                    let ek = self.embed[id * d_n + k].widen();
                    let out_row = &self.out[k * v_n..(k + 1) * v_n];
                    let mut acc = 0.0;
                    for ((go, &o), &gv) in g_out[k * v_n..(k + 1) * v_n].iter_mut().zip(out_row).zip(&g) {
                        *go += ek * gv;
                        acc += o.widen() * gv;
                    }
                    g_embed[id * d_n + k] += acc;
                }
            }
        }
        let grads = Checkpoint::new()
            .with_tensor(EMBED, Tensor::from_f64(T::DTYPE, vec![v_n, d_n], g_embed).unwrap())
            .with_tensor(OUT, Tensor::from_f64(T::DTYPE, vec![d_n, v_n], g_out).unwrap());
        Ok(Evaluation { loss, clm, fusion, grads })
    }

    /// `θ ← θ − lr · g` for gradients laid out like [`ToyLm::to_checkpoint`].
    pub fn apply_gradient(&mut self, grad_embed: &[f64], grad_out: &[f64], lr: f64) {
        for (p, g) in self.embed.iter_mut().zip(grad_embed) {
            *p = T::narrow(p.widen() - lr * g);
        }
        for (p, g) in self.out.iter_mut().zip(grad_out) {
            *p = T::narrow(p.widen() - lr * g);
        }
    }

}
