//! Global planning: the per-node latent that drives the dialogue-act sequence.
//!
//! Prior `p(z | x)` and posterior `q(z | x, y)` are diagonal Gaussians whose
//! means and scales come from MLP heads (scale through softplus). Acts are
//! emitted autoregressively by a two-layer MLP conditioned on the previous
//! act, the node encoding and the sampled latent.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DialogueAct;
use crate::error::{Error, Result};
use crate::model::{group_sum, Planner};
use crate::nn::{gelu, softplus, to_f64_vec, Linear, ParamStore};
use crate::textenc::PooledVec;

/// Host-side diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: sigma.len() });
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) || sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("gaussian parameters must be finite with sigma > 0".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_tensors(&self, dtype: DType) -> Result<Gaussian> {
        let t = |v: &Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v.clone(), (1, v.len()), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Gaussian { mu: t(&self.mu)?, sigma: t(&self.sigma)? })
    }

    pub(crate) fn from_row(g: &Gaussian) -> Result<Self> {
        Self::new(to_f64_vec(&g.mu)?, to_f64_vec(&g.sigma)?)
    }
}

/// Batched diagonal Gaussian, `mu` and `sigma` both `[N, d_z]`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// `z = mu + sigma * eps`, differentiable in `mu` and `sigma`.
pub fn reparam(g: &Gaussian, eps: &Tensor) -> Result<Tensor> {
    Ok((&g.mu + (&g.sigma * eps)?)?)
}

/// Closed-form KL(q || p) per dimension, `[N, d_z]`.
pub fn kl_diag_per_dim(q: &Gaussian, p: &Gaussian) -> Result<Tensor> {
    let log_ratio = (p.sigma.log()? - q.sigma.log()?)?;
    let num = (q.sigma.sqr()? + (&q.mu - &p.mu)?.sqr()?)?;
    let quad = (num / (p.sigma.sqr()? * 2.0)?)?;
    Ok(((log_ratio + quad)? - 0.5)?)
}

/// Closed-form KL(q || p) summed over dimensions, `[N]`.
pub fn kl_diag(q: &Gaussian, p: &Gaussian) -> Result<Tensor> {
    Ok(kl_diag_per_dim(q, p)?.sum(D::Minus1)?)
}

/// Log density of `z` under `g`, summed over dimensions, `[N]`.
pub fn log_density(z: &Tensor, g: &Gaussian) -> Result<Tensor> {
    let std = ((z - &g.mu)? / &g.sigma)?;
    let per_dim = ((std.sqr()? * 0.5)? + g.sigma.log()?)?;
    let d = z.dim(D::Minus1)? as f64;
    Ok(((per_dim.sum(D::Minus1)? + 0.5 * d * (2.0 * std::f64::consts::PI).ln())? * -1.0)?)
}

pub fn kl_diag_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    let kl = kl_diag(&q.to_tensors(DType::F64)?, &p.to_tensors(DType::F64)?)?;
    Ok(kl.squeeze(0)?.to_scalar::<f64>()?)
}

pub fn sample_reparam(params: &GaussianParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), got: eps.len() });
    }
    Ok(params.mu.iter().zip(&params.sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

/// MLP producing a diagonal Gaussian: two GELU hidden layers, then separate
/// linear outputs for the mean and the pre-softplus scale.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    hidden1: Linear,
    hidden2: Linear,
    mu: Linear,
    sigma: Linear,
    input_dim: usize,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        d_z: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden1: Linear::new(store, &format!("{name}.hidden1"), input_dim, hidden, rng)?,
            hidden2: Linear::new(store, &format!("{name}.hidden2"), hidden, hidden, rng)?,
            mu: Linear::new(store, &format!("{name}.mu"), hidden, d_z, rng)?,
            sigma: Linear::new(store, &format!("{name}.sigma"), hidden, d_z, rng)?,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Parameter-name prefixes of the two output layers.
    pub fn output_layers(&self) -> [&str; 2] {
        [self.mu.name(), self.sigma.name()]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Gaussian> {
        let got = x.dim(D::Minus1)?;
        if got != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got });
        }
        let h = gelu(&self.hidden2.forward(&gelu(&self.hidden1.forward(x)?)?)?)?;
        Ok(Gaussian { mu: self.mu.forward(&h)?, sigma: softplus(&self.sigma.forward(&h)?)? })
    }
}

/// Previous-act id used before the first act of a turn.
pub const ACT_BOS: usize = DialogueAct::COUNT;

/// Two-layer MLP over `[embed(prev_act), h_x, z_a]` with softmax over the seven acts.
#[derive(Debug, Clone)]
pub struct ActHead {
    prev_embedding: Tensor,
    hidden: Linear,
    output: Linear,
}

impl ActHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_z: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            prev_embedding: store.normal(&format!("{name}.prev_embedding"), &[ACT_BOS + 1, d_model], 0.1, rng)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * d_model + d_z, 2 * d_model, rng)?,
            output: Linear::new(store, &format!("{name}.output"), 2 * d_model, DialogueAct::COUNT, rng)?,
        })
    }

    pub fn output_layer(&self) -> &str {
        self.output.name()
    }

    /// Log-probabilities `[A, 7]` for rows of previous-act ids, node encodings and latents.
    pub fn log_probs(&self, prev: &[u32], h_x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let prev = Tensor::from_vec(prev.to_vec(), prev.len(), &Device::Cpu)?;
        let input = Tensor::cat(&[&self.prev_embedding.index_select(&prev, 0)?, h_x, z], 1)?;
        let logits = self.output.forward(&gelu(&self.hidden.forward(&input)?)?)?;
        Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?)
    }
}

/// Per-item global terms: `kl`, `act_nll` and `log_w = log p(z) - log q(z)` are `[B]`.
#[derive(Debug, Clone)]
pub struct GlobalTerms {
    pub prior: Gaussian,
    pub posterior: Gaussian,
    pub z: Tensor,
    pub kl_per_dim: Tensor,
    pub kl: Tensor,
    pub act_nll: Tensor,
    pub log_w: Tensor,
}

/// Scalar ELBO pieces; `loss = kl + nll` is the negated ELBO.
#[derive(Debug, Clone)]
pub struct ElboParts {
    pub loss: Tensor,
    pub kl: Tensor,
    pub nll: Tensor,
}

impl ElboParts {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((s(&self.loss)?, s(&self.kl)?, s(&self.nll)?))
    }
}

fn check_pooled(v: &PooledVec, expected: usize) -> Result<()> {
    if v.dim() != expected {
        return Err(Error::DimensionMismatch { expected, got: v.dim() });
    }
    Ok(())
}

impl Planner {
    /// Batched global terms with the latent drawn from the posterior.
    pub fn global_terms(
        &self,
        h_x: &Tensor,
        h_y: &Tensor,
        acts: &[&[DialogueAct]],
        eps: &Tensor,
    ) -> Result<GlobalTerms> {
        let b = h_x.dim(0)?;
        if acts.len() != b || acts.iter().any(|a| a.is_empty()) {
            return Err(Error::Empty("act sequence"));
        }
        let prior = self.prior_global.forward(h_x)?;
        let posterior = self.posterior_global.forward(&Tensor::cat(&[h_x, h_y], 1)?)?;
        let z = reparam(&posterior, eps)?;
        let kl_per_dim = kl_diag_per_dim(&posterior, &prior)?;
        let kl = kl_per_dim.sum(D::Minus1)?;
        let log_w = (log_density(&z, &prior)? - log_density(&z, &posterior)?)?;

        let mut prev = Vec::new();
        let mut owner = Vec::new();
        let mut target = Vec::new();
        for (i, seq) in acts.iter().enumerate() {
            let mut last = ACT_BOS as u32;
            for act in seq.iter() {
                prev.push(last);
                owner.push(i);
                target.push(act.index() as u32);
                last = act.index() as u32;
            }
        }
        let owner_idx = Tensor::from_vec(owner.iter().map(|&i| i as u32).collect::<Vec<_>>(), owner.len(), &Device::Cpu)?;
        let log_probs = self.act_head.log_probs(&prev, &h_x.index_select(&owner_idx, 0)?, &z.index_select(&owner_idx, 0)?)?;
        let target = Tensor::from_vec(target.clone(), (target.len(), 1), &Device::Cpu)?;
        let picked = log_probs.gather(&target, 1)?.squeeze(1)?;
        let act_nll = group_sum(&picked.neg()?, &owner, b)?;
        Ok(GlobalTerms { prior, posterior, z, kl_per_dim, kl, act_nll, log_w })
    }

    fn row(v: &PooledVec) -> Result<Tensor> {
        Ok(v.0.unsqueeze(0)?)
    }

    pub fn prior_global(&self, h_x: &PooledVec) -> Result<GaussianParams> {
        check_pooled(h_x, self.d_model())?;
        GaussianParams::from_row(&self.prior_global.forward(&Self::row(h_x)?)?)
    }

    pub fn posterior_global(&self, h_x: &PooledVec, h_y: &PooledVec) -> Result<GaussianParams> {
        check_pooled(h_x, self.d_model())?;
        check_pooled(h_y, self.d_model())?;
        let input = Tensor::cat(&[Self::row(h_x)?, Self::row(h_y)?], 1)?;
        GaussianParams::from_row(&self.posterior_global.forward(&input)?)
    }

    /// Distribution over the seven acts for the next utterance of a turn.
    pub fn act_step(&self, prev: Option<DialogueAct>, h_x: &PooledVec, z_a: &[f64]) -> Result<[f64; DialogueAct::COUNT]> {
        check_pooled(h_x, self.d_model())?;
        if z_a.len() != self.d_z() {
            return Err(Error::DimensionMismatch { expected: self.d_z(), got: z_a.len() });
        }
        let z = Tensor::from_vec(z_a.to_vec(), (1, z_a.len()), &Device::Cpu)?.to_dtype(self.dtype())?;
        let prev = prev.map_or(ACT_BOS, DialogueAct::index) as u32;
        let lp = self.act_head.log_probs(&[prev], &Self::row(h_x)?, &z)?;
        let probs = to_f64_vec(&lp.exp()?)?;
        let mut out = [0.0; DialogueAct::COUNT];
        out.copy_from_slice(&probs);
        Ok(out)
    }

    /// Negated global ELBO for one node with a single reparametrized sample.
    pub fn elbo_global(&self, h_x: &Tensor, acts: &[DialogueAct], h_y: &Tensor, eps: &Tensor) -> Result<ElboParts> {
        if acts.is_empty() {
            return Err(Error::Empty("act sequence"));
        }
        let row = |t: &Tensor| -> Result<Tensor> { Ok(if t.rank() == 1 { t.unsqueeze(0)? } else { t.clone() }) };
        let terms = self.global_terms(&row(h_x)?, &row(h_y)?, &[acts], &row(eps)?)?;
        let kl = terms.kl.sum_all()?;
        let nll = terms.act_nll.sum_all()?;
        Ok(ElboParts { loss: (&kl + &nll)?, kl, nll })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_planner;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kl_examples() {
        let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        let q = GaussianParams::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_diag_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(kl_diag_gaussian(&p, &p).unwrap(), 0.0);
        let r = GaussianParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(kl_diag_gaussian(&q, &r), Err(Error::DimensionMismatch { .. })));
        assert!(GaussianParams::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn reparam_examples() {
        let g = GaussianParams::new(vec![0.5, -1.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(sample_reparam(&g, &[0.0, 0.0]).unwrap(), g.mu);
        let std = GaussianParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(sample_reparam(&std, &[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn reparam_moments_match() {
        let g = GaussianParams::new(vec![1.5], vec![0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_reparam(&g, &[StandardNormal.sample(&mut rng)]).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = 0.7 / (n as f64).sqrt();
        // SE of the sample std for a normal is sigma / sqrt(2(n-1)).
        let se_std = 0.7 / (2.0 * (n - 1) as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se_mean);
        assert!((var.sqrt() - 0.7).abs() < 3.0 * se_std);
    }

    #[test]
    fn reparam_derivatives() {
        let mu = candle_core::Var::new(&[[0.3f64, -0.2]], &Device::Cpu).unwrap();
        let sigma = candle_core::Var::new(&[[1.2f64, 0.4]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[0.7f64, -1.3]], &Device::Cpu).unwrap();
        let g = Gaussian { mu: mu.as_tensor().clone(), sigma: sigma.as_tensor().clone() };
        let grads = reparam(&g, &eps).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(to_f64_vec(grads.get(mu.as_tensor()).unwrap()).unwrap(), vec![1.0, 1.0]);
        assert_eq!(to_f64_vec(grads.get(sigma.as_tensor()).unwrap()).unwrap(), vec![0.7, -1.3]);
    }

    #[test]
    fn zero_initialized_heads_give_standard_softplus() {
        let planner = tiny_planner(DType::F64, 3);
        for name in planner.prior_global.output_layers().into_iter().chain(planner.posterior_global.output_layers()) {
            planner.params().zero_prefix(name).unwrap();
        }
        let h = planner.encode_pooled(&[1, 20, 2]).unwrap();
        let prior = planner.prior_global(&h).unwrap();
        assert!(prior.mu.iter().all(|&m| m == 0.0));
        assert!(prior.sigma.iter().all(|&s| (s - std::f64::consts::LN_2).abs() < 1e-12));
        let post = planner.posterior_global(&h, &h).unwrap();
        assert_eq!(post.dim(), planner.d_z());
        assert!(post.sigma.iter().all(|&s| (s - std::f64::consts::LN_2).abs() < 1e-12));
        assert_eq!(planner.prior_global(&h).unwrap(), prior);
    }

    #[test]
    fn prior_sigma_positive_on_random_inputs() {
        let planner = tiny_planner(DType::F32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = crate::nn::standard_normal(&[1000, planner.d_model()], DType::F32, &mut rng).unwrap();
        let x = (x * 10.0).unwrap();
        let g = planner.prior_global.forward(&x).unwrap();
        let sig = to_f64_vec(&g.sigma).unwrap();
        assert!(sig.iter().all(|s| *s > 0.0 && s.is_finite()));
    }

    #[test]
    fn posterior_depends_on_observation() {
        let planner = tiny_planner(DType::F64, 6);
        let hx = planner.encode_pooled(&[1, 20, 2]).unwrap();
        let hy = planner.encode_pooled(&[1, 21, 22, 2]).unwrap();
        let hy2 = PooledVec::new((&hy.0 + 0.5).unwrap()).unwrap();
        let a = planner.posterior_global(&hx, &hy).unwrap();
        let b = planner.posterior_global(&hx, &hy2).unwrap();
        assert_ne!(a.mu, b.mu);
        let short = PooledVec::new(Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(planner.posterior_global(&hx, &short), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn act_step_is_simplex_and_uniform_when_zeroed() {
        let planner = tiny_planner(DType::F64, 7);
        let h = planner.encode_pooled(&[1, 20, 2]).unwrap();
        let z = vec![0.3; planner.d_z()];
        let p = planner.act_step(None, &h, &z).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        planner.params().zero_prefix(planner.act_head.output_layer()).unwrap();
        let p = planner.act_step(Some(DialogueAct::Inform), &h, &z).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn elbo_global_examples() {
        let planner = tiny_planner(DType::F64, 8);
        planner.params().zero_prefix(planner.act_head.output_layer()).unwrap();
        let hx = planner.encode_pooled(&[1, 20, 2]).unwrap();
        let hy = planner.encode_pooled(&[1, 21, 2]).unwrap();
        let eps = Tensor::zeros(planner.d_z(), DType::F64, &Device::Cpu).unwrap();
        let parts = planner.elbo_global(&hx.0, &[DialogueAct::Inform], &hy.0, &eps).unwrap();
        let (loss, kl, nll) = parts.values().unwrap();
        assert!((nll - 7f64.ln()).abs() < 1e-12);
        assert!((loss - (kl + nll)).abs() < 1e-12);
        assert!(kl >= 0.0);
        assert!(planner.elbo_global(&hx.0, &[], &hy.0, &eps).is_err());

        // Prior and posterior forced equal: zero both heads.
        for name in planner.prior_global.output_layers().into_iter().chain(planner.posterior_global.output_layers()) {
            planner.params().zero_prefix(name).unwrap();
        }
        let (_, kl, _) = planner.elbo_global(&hx.0, &[DialogueAct::Inform], &hy.0, &eps).unwrap().values().unwrap();
        assert_eq!(kl, 0.0);
    }
}
