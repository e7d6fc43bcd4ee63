//! Local planning: the per-utterance latent, the plan vector handed to the
//! decoder, and the teacher-forced utterance likelihood.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::globalplan::{kl_diag_per_dim, log_density, reparam, ElboParts, Gaussian, GaussianParams};
use crate::model::Planner;
use crate::nn::{to_f64_vec, DropRng};
use crate::textenc::{PooledVec, BOS, EOS, PAD};

/// `[h_a ‖ z_y]`, exactly as concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanVector {
    pub values: Vec<f64>,
    d_model: usize,
}

impl PlanVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The act-encoding part and the latent part.
    pub fn split(&self) -> (&[f64], &[f64]) {
        self.values.split_at(self.d_model)
    }
}

pub fn make_plan_vector(h_a: &[f64], z_y: &[f64]) -> PlanVector {
    let mut values = h_a.to_vec();
    values.extend_from_slice(z_y);
    PlanVector { values, d_model: h_a.len() }
}

/// Per-utterance local terms, each `[U]` except the Gaussians and `z` (`[U, d_z]`).
#[derive(Debug, Clone)]
pub struct LocalTerms {
    pub prior: Gaussian,
    pub posterior: Gaussian,
    pub z: Tensor,
    pub kl_per_dim: Tensor,
    pub kl: Tensor,
    pub token_nll: Tensor,
    pub log_w: Tensor,
}

fn check(v: &PooledVec, expected: usize) -> Result<Tensor> {
    if v.dim() != expected {
        return Err(Error::DimensionMismatch { expected, got: v.dim() });
    }
    Ok(v.0.unsqueeze(0)?)
}

fn check_target(target: &[u32]) -> Result<()> {
    if target.len() < 2 {
        return Err(Error::Empty("target utterance (needs BOS and EOS)"));
    }
    if target[0] != BOS || target[target.len() - 1] != EOS {
        return Err(Error::InvalidArgument("target must be framed by BOS and EOS".into()));
    }
    Ok(())
}

impl Planner {
    /// Decoder memory `[U, 3, d]`: previous utterance, node, projected plan.
    fn memory(&self, prev: &Tensor, h_x: &Tensor, h_a: &Tensor, z: &Tensor) -> Result<Tensor> {
        let plan = self.plan_proj.forward(&Tensor::cat(&[h_a, z], 1)?)?;
        Ok(Tensor::stack(&[prev, h_x, &plan], 1)?)
    }

    /// Teacher-forced token NLL per row, summed over target positions.
    pub(crate) fn token_nll_rows(&self, memory: &Tensor, targets: &[Vec<u32>], rng: &mut DropRng<'_>) -> Result<Tensor> {
        for t in targets {
            check_target(t)?;
        }
        let inputs: Vec<Vec<u32>> = targets.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
        let steps = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let mut labels = Vec::with_capacity(targets.len() * steps);
        let mut mask = Vec::with_capacity(targets.len() * steps);
        for t in targets {
            for k in 0..steps {
                let label = t.get(k + 1).copied();
                labels.push(label.unwrap_or(PAD));
                mask.push(if label.is_some() { 1.0 } else { 0.0 });
            }
        }
        let logits = self.backbone.decode_logits(memory, &[0, 1, 2], &inputs, rng)?;
        let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let labels = Tensor::from_vec(labels, (targets.len(), steps, 1), &Device::Cpu)?;
        let picked = log_probs.gather(&labels, 2)?.squeeze(2)?;
        let mask = Tensor::from_vec(mask, (targets.len(), steps), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok((picked * mask)?.sum(1)?.neg()?)
    }

    /// Batched local terms with `z_y` drawn from the posterior.
    #[allow(clippy::too_many_arguments)]
    pub fn local_terms(
        &self,
        h_x: &Tensor,
        h_a: &Tensor,
        h_y: &Tensor,
        prev: &Tensor,
        targets: &[Vec<u32>],
        eps: &Tensor,
        rng: &mut DropRng<'_>,
    ) -> Result<LocalTerms> {
        let u = h_x.dim(0)?;
        if targets.len() != u {
            return Err(Error::DimensionMismatch { expected: u, got: targets.len() });
        }
        let prior = self.prior_local.forward(&Tensor::cat(&[h_x, h_a], 1)?)?;
        let posterior = self.posterior_local.forward(&Tensor::cat(&[h_x, h_a, h_y], 1)?)?;
        let z = reparam(&posterior, eps)?;
        let kl_per_dim = kl_diag_per_dim(&posterior, &prior)?;
        let kl = kl_per_dim.sum(D::Minus1)?;
        let log_w = (log_density(&z, &prior)? - log_density(&z, &posterior)?)?;
        let memory = self.memory(prev, h_x, h_a, &z)?;
        let token_nll = self.token_nll_rows(&memory, targets, rng)?;
        Ok(LocalTerms { prior, posterior, z, kl_per_dim, kl, token_nll, log_w })
    }

    pub fn prior_local(&self, h_x: &PooledVec, h_a: &PooledVec) -> Result<GaussianParams> {
        let d = self.d_model();
        let input = Tensor::cat(&[check(h_x, d)?, check(h_a, d)?], 1)?;
        GaussianParams::from_row(&self.prior_local.forward(&input)?)
    }

    pub fn posterior_local(&self, h_x: &PooledVec, h_a: &PooledVec, h_yij: &PooledVec) -> Result<GaussianParams> {
        let d = self.d_model();
        let input = Tensor::cat(&[check(h_x, d)?, check(h_a, d)?, check(h_yij, d)?], 1)?;
        GaussianParams::from_row(&self.posterior_local.forward(&input)?)
    }

    /// Projects a plan vector to one memory row.
    pub fn plan_slot(&self, plan: &PlanVector) -> Result<PooledVec> {
        let expected = self.d_model() + self.d_z();
        if plan.len() != expected || plan.d_model != self.d_model() {
            return Err(Error::DimensionMismatch { expected, got: plan.len() });
        }
        let t = Tensor::from_vec(plan.values.clone(), (1, expected), &Device::Cpu)?.to_dtype(self.dtype())?;
        PooledVec::new(self.plan_proj.forward(&t)?.squeeze(0)?)
    }

    /// Sum of teacher-forced token NLLs of `target` in evaluation mode.
    pub fn utterance_nll(&self, prev: &PooledVec, h_x: &PooledVec, plan: &PlanVector, target: &[u32]) -> Result<f64> {
        let d = self.d_model();
        let slot = self.plan_slot(plan)?;
        let memory = Tensor::stack(&[check(prev, d)?, check(h_x, d)?, slot.0.unsqueeze(0)?], 1)?;
        let nll = self.token_nll_rows(&memory, &[target.to_vec()], &mut None)?;
        Ok(nll.to_dtype(DType::F64)?.squeeze(0)?.to_scalar::<f64>()?)
    }

    /// Negated local ELBO for one utterance with a single reparametrized sample.
    pub fn elbo_local(
        &self,
        h_x: &PooledVec,
        h_a: &PooledVec,
        target: &[u32],
        h_yij: &PooledVec,
        prev: &PooledVec,
        eps: &[f64],
    ) -> Result<ElboParts> {
        let d = self.d_model();
        if eps.len() != self.d_z() {
            return Err(Error::DimensionMismatch { expected: self.d_z(), got: eps.len() });
        }
        let eps = Tensor::from_vec(eps.to_vec(), (1, eps.len()), &Device::Cpu)?.to_dtype(self.dtype())?;
        let terms = self.local_terms(
            &check(h_x, d)?,
            &check(h_a, d)?,
            &check(h_yij, d)?,
            &check(prev, d)?,
            &[target.to_vec()],
            &eps,
            &mut None,
        )?;
        let kl = terms.kl.sum_all()?;
        let nll = terms.token_nll.sum_all()?;
        Ok(ElboParts { loss: (&kl + &nll)?, kl, nll })
    }

    /// Host copy of the posterior sample used by `elbo_local` for the same inputs.
    pub fn posterior_local_sample(
        &self,
        h_x: &PooledVec,
        h_a: &PooledVec,
        h_yij: &PooledVec,
        eps: &[f64],
    ) -> Result<Vec<f64>> {
        let q = self.posterior_local(h_x, h_a, h_yij)?;
        let qt = q.to_tensors(self.dtype())?;
        let eps = Tensor::from_vec(eps.to_vec(), (1, eps.len()), &Device::Cpu)?.to_dtype(self.dtype())?;
        to_f64_vec(&reparam(&qt, &eps)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DialogueAct;
    use crate::globalplan::kl_diag_gaussian;
    use crate::testutil::tiny_planner;

    fn pooled(p: &Planner, ids: &[u32]) -> PooledVec {
        p.encode_pooled(ids).unwrap()
    }

    fn zero_heads(p: &Planner) {
        for name in p.prior_local.output_layers().into_iter().chain(p.posterior_local.output_layers()) {
            p.params().zero_prefix(name).unwrap();
        }
    }

    #[test]
    fn plan_vector_is_lossless_concatenation() {
        let v = make_plan_vector(&[1.0, 2.0], &[3.0]);
        assert_eq!(v.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(v.split(), (&[1.0, 2.0][..], &[3.0][..]));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn zero_heads_give_ln2_scale() {
        let p = tiny_planner(DType::F64, 1);
        zero_heads(&p);
        let hx = pooled(&p, &[BOS, 20, EOS]);
        let ha = p.encode_act_pooled(DialogueAct::Inform).unwrap();
        for g in [p.prior_local(&hx, &ha).unwrap(), p.posterior_local(&hx, &ha, &hx).unwrap()] {
            assert_eq!(g.dim(), p.d_z());
            assert!(g.mu.iter().all(|m| *m == 0.0));
            assert!(g.sigma.iter().all(|s| (s - std::f64::consts::LN_2).abs() < 1e-12));
        }
    }

    #[test]
    fn prior_depends_on_act_and_posterior_on_utterance() {
        let p = tiny_planner(DType::F64, 2);
        let hx = pooled(&p, &[BOS, 20, EOS]);
        let a = p.encode_act_pooled(DialogueAct::Inform).unwrap();
        let b = p.encode_act_pooled(DialogueAct::Closing).unwrap();
        assert_ne!(p.prior_local(&hx, &a).unwrap(), p.prior_local(&hx, &b).unwrap());
        let hy = pooled(&p, &[BOS, 21, EOS]);
        let hy2 = PooledVec::new((&hy.0 + 0.25).unwrap()).unwrap();
        assert_ne!(p.posterior_local(&hx, &a, &hy).unwrap(), p.posterior_local(&hx, &a, &hy2).unwrap());
        let short = PooledVec::new(Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(p.prior_local(&hx, &short), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn uniform_decoder_gives_log_vocab() {
        let p = tiny_planner(DType::F64, 3);
        p.params().zero_prefix("backbone.output").unwrap();
        let hx = pooled(&p, &[BOS, 20, EOS]);
        let plan = make_plan_vector(&hx.to_vec().unwrap(), &vec![0.0; p.d_z()]);
        let nll = p.utterance_nll(&PooledVec::new(p.backbone().sentinel().clone()).unwrap(), &hx, &plan, &[BOS, EOS]).unwrap();
        assert!((nll - (p.vocab().len() as f64).ln()).abs() < 1e-10);
        assert!(p.utterance_nll(&hx, &hx, &plan, &[BOS]).is_err());
    }

    #[test]
    fn utterance_nll_matches_step_by_step_oracle() {
        let p = tiny_planner(DType::F64, 4);
        let hx = pooled(&p, &[BOS, 20, EOS]);
        let prev = pooled(&p, &[BOS, 22, 23, EOS]);
        let ha = p.encode_act_pooled(DialogueAct::Suggestion).unwrap();
        let plan = make_plan_vector(&ha.to_vec().unwrap(), &vec![0.3; p.d_z()]);
        let target = [BOS, 20, 21, 25, EOS];
        let nll = p.utterance_nll(&prev, &hx, &plan, &target).unwrap();
        let memory = [prev.clone(), hx.clone(), p.plan_slot(&plan).unwrap()];
        let mut oracle = 0.0;
        for k in 1..target.len() {
            let probs = to_f64_vec(&p.decode_step(&memory, &target[..k]).unwrap()).unwrap();
            oracle -= probs[target[k] as usize].ln();
        }
        assert!((nll - oracle).abs() < 1e-9, "{nll} vs {oracle}");
    }

    #[test]
    fn elbo_local_parts() {
        let p = tiny_planner(DType::F64, 5);
        let hx = pooled(&p, &[BOS, 20, EOS]);
        let ha = p.encode_act_pooled(DialogueAct::Inform).unwrap();
        let target = vec![BOS, 21, 22, EOS];
        let hy = pooled(&p, &target);
        let prev = pooled(&p, &[BOS, 24, EOS]);
        let eps: Vec<f64> = (0..p.d_z()).map(|i| (i as f64 - 1.0) * 0.4).collect();
        let (loss, kl, nll) = p.elbo_local(&hx, &ha, &target, &hy, &prev, &eps).unwrap().values().unwrap();
        assert!((loss - (kl + nll)).abs() < 1e-12);

        // kl agrees with the host-level closed form.
        let q = p.posterior_local(&hx, &ha, &hy).unwrap();
        let pr = p.prior_local(&hx, &ha).unwrap();
        assert!((kl - kl_diag_gaussian(&q, &pr).unwrap()).abs() < 1e-12);

        // token_nll is utterance_nll at the posterior sample.
        let z = p.posterior_local_sample(&hx, &ha, &hy, &eps).unwrap();
        let plan = make_plan_vector(&ha.to_vec().unwrap(), &z);
        assert!((nll - p.utterance_nll(&prev, &hx, &plan, &target).unwrap()).abs() < 1e-10);

        zero_heads(&p);
        let (_, kl, _) = p.elbo_local(&hx, &ha, &target, &hy, &prev, &eps).unwrap().values().unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn small_sigma_converges_to_deterministic_nll() {
        let p = tiny_planner(DType::F64, 6);
        let hx = pooled(&p, &[BOS, 20, EOS]);
        let ha = p.encode_act_pooled(DialogueAct::Inform).unwrap();
        let target = vec![BOS, 21, 22, EOS];
        let mu = p.posterior_local(&hx, &ha, &hx).unwrap().mu;
        let det = p.utterance_nll(&hx, &hx, &make_plan_vector(&ha.to_vec().unwrap(), &mu), &target).unwrap();
        let q = GaussianParams::new(mu.clone(), vec![1e-4; mu.len()]).unwrap();
        let eps = vec![1.0; mu.len()];
        let z = crate::globalplan::sample_reparam(&q, &eps).unwrap();
        let near = p.utterance_nll(&hx, &hx, &make_plan_vector(&ha.to_vec().unwrap(), &z), &target).unwrap();
        assert!((det - near).abs() < 1e-3);
    }
}
