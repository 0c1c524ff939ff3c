use crate::error::Result;
use crate::tensor::Tensor;

use super::block::{block_forward, embed_tokens, skip_merge, timestep_vector, unembed_rows};
use super::{Conditioning, DiTSpec, DiffusionSpec, LatentState, Weights};

/// States `x_T, x_{T-1}, .., x_0`.
pub type Trace = Vec<LatentState>;

/// Input sequence for the block stack: image embeddings, preceded by the
/// text rows in in-context mode.
pub(crate) fn initial_sequence(x: &Tensor, w: &Weights, cond: &Conditioning) -> Result<Tensor> {
    let img = embed_tokens(x, w)?;
    match cond {
        Conditioning::InContext(text) => Ok(Tensor::concat_rows(&[text, &img])?),
        _ => Ok(img),
    }
}

pub(crate) fn adaln_vector(cond: &Conditioning) -> Option<&Tensor> {
    match cond {
        Conditioning::AdalnZero(c) => Some(c),
        _ => None,
    }
}

pub(crate) fn cross_text(cond: &Conditioning) -> Option<&Tensor> {
    match cond {
        Conditioning::CrossAttention(t) => Some(t),
        _ => None,
    }
}

/// Noise prediction for one branch.
pub fn model_forward(spec: &DiTSpec, weights: &Weights, state: &LatentState, cond: &Conditioning) -> Result<Tensor> {
    cond.check(spec)?;
    let g = timestep_vector(spec, state.t, adaln_vector(cond))?;
    let text = cross_text(cond);
    let mut h = initial_sequence(&state.x, weights, cond)?;
    let mut saved: Vec<Option<Tensor>> = vec![None; spec.num_layers];
    for j in 0..spec.num_layers {
        if let Some(src) = spec.skip_source(j) {
            let sw = weights.blocks[j].skip.as_ref().expect("u_skip block has skip weights");
            h = skip_merge(&h, saved[src].as_ref().expect("skip source computed"), sw)?;
        }
        h = block_forward(spec, weights, j, &h, &g, text, None)?.out;
        if spec.is_skip_source(j) {
            saved[j] = Some(h.clone());
        }
    }
    let ctx = spec.context_tokens();
    unembed_rows(&h.slice_rows(ctx..ctx + spec.image_tokens), weights)
}

/// `x_{t-1} = x_t - alpha[t-1] · eps`.
pub fn scheduler_update(x_t: &Tensor, eps: &Tensor, t: usize, sched: &DiffusionSpec) -> Result<Tensor> {
    let a = sched.alpha_schedule[t - 1];
    Ok(x_t.sub(&eps.scale(a))?)
}

/// `eps_uncond + g · (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, g: f64) -> Result<Tensor> {
    Ok(eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(g))?)
}

/// Guided or plain noise prediction for one step.
pub(crate) fn guided_eps(
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    weights: &Weights,
    state: &LatentState,
    cond: &Conditioning,
) -> Result<Tensor> {
    let eps_c = model_forward(spec, weights, state, cond)?;
    match sched.guidance_scale {
        Some(g) => {
            let eps_u = model_forward(spec, weights, state, &cond.null_like())?;
            cfg_combine(&eps_c, &eps_u, g)
        }
        None => Ok(eps_c),
    }
}

/// The reference serial denoising loop.
pub fn serial_diffusion(
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    weights: &Weights,
    x_t: &Tensor,
    cond: &Conditioning,
) -> Result<Trace> {
    spec.validate()?;
    sched.validate()?;
    cond.check(spec)?;
    let mut state = LatentState {
        x: x_t.clone(),
        t: sched.num_steps,
    };
    let mut trace = vec![state.clone()];
    for t in sched.steps() {
        let eps = guided_eps(spec, sched, weights, &state, cond)?;
        state = LatentState {
            x: scheduler_update(&state.x, &eps, t, sched)?,
            t: t - 1,
        };
        trace.push(state.clone());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockTopology, ConditioningMode};
    use crate::rng::SeededRng;
    use crate::tensor::linear;

    fn inputs(spec: &DiTSpec, seed: u64) -> (Weights, Tensor, Conditioning) {
        let mut rng = SeededRng::new(seed);
        let w = Weights::init(spec, &mut rng);
        let x = rng.normal_tensor(&[spec.image_tokens, spec.latent_channels]);
        let c = Conditioning::random(spec, &mut rng);
        (w, x, c)
    }

    #[test]
    fn empty_stack_is_affine() {
        let mut spec = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear);
        spec.num_layers = 0;
        let (w, x, c) = inputs(&spec, 1);
        let eps = model_forward(&spec, &w, &LatentState { x: x.clone(), t: 3 }, &c).unwrap();
        let want = linear(&linear(&x, &w.embed_w, &w.embed_b).unwrap(), &w.unembed_w, &w.unembed_b).unwrap();
        assert!(eps.bit_eq(&want));
    }

    #[test]
    fn zeroed_skip_matches_linear() {
        for mode in ConditioningMode::ALL {
            let lin = DiTSpec::desk(mode, BlockTopology::Linear);
            let skip = DiTSpec::desk(mode, BlockTopology::USkip);
            let (mut ws, x, c) = inputs(&skip, 2);
            ws.zero_skips();
            let mut wl = ws.clone();
            for b in &mut wl.blocks {
                b.skip = None;
            }
            let st = LatentState { x, t: 5 };
            let a = model_forward(&lin, &wl, &st, &c).unwrap();
            let b = model_forward(&skip, &ws, &st, &c).unwrap();
            assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn scheduler_cases() {
        let sched = DiffusionSpec::linear(4);
        let mut rng = SeededRng::new(3);
        let x = rng.normal_tensor(&[5, 4]);
        let zero = Tensor::zeros(&[5, 4]);
        assert!(scheduler_update(&x, &zero, 2, &sched).unwrap().bit_eq(&x));
        let mut ones = sched.clone();
        ones.alpha_schedule = vec![1.0; 4];
        assert!(scheduler_update(&x, &x, 3, &ones).unwrap().data().iter().all(|v| *v == 0.0));
        let eps = rng.normal_tensor(&[5, 4]);
        let got = scheduler_update(&x, &eps, 4, &sched).unwrap();
        for i in 0..20 {
            assert_eq!(got.data()[i], x.data()[i] - sched.alpha_schedule[3] * eps.data()[i]);
        }
    }

    #[test]
    fn cfg_combine_cases() {
        let mut rng = SeededRng::new(4);
        let c = rng.normal_tensor(&[6, 4]);
        let u = rng.normal_tensor(&[6, 4]);
        assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
        assert!(cfg_combine(&c, &u, 1.0).unwrap().rel_err(&c).unwrap() < 1e-15);
        let got = cfg_combine(&c, &u, 7.5).unwrap();
        for i in 0..24 {
            let (cv, uv) = (c.data()[i], u.data()[i]);
            assert_eq!(got.data()[i], uv + 7.5 * (cv - uv));
        }
    }

    #[test]
    fn zero_steps_and_one_step() {
        let spec = DiTSpec::desk(ConditioningMode::InContext, BlockTopology::USkip);
        let (w, x, c) = inputs(&spec, 5);
        let tr = serial_diffusion(&spec, &DiffusionSpec::linear(0), &w, &x, &c).unwrap();
        assert_eq!(tr.len(), 1);
        assert!(tr[0].x.bit_eq(&x));
        let sched = DiffusionSpec::linear(1);
        let tr = serial_diffusion(&spec, &sched, &w, &x, &c).unwrap();
        let eps = model_forward(&spec, &w, &LatentState { x: x.clone(), t: 1 }, &c).unwrap();
        assert!(tr[1].x.bit_eq(&scheduler_update(&x, &eps, 1, &sched).unwrap()));
        assert_eq!(tr[1].t, 0);
    }

    #[test]
    fn serial_is_deterministic() {
        let spec = DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::USkip);
        let sched = DiffusionSpec::linear(3).with_guidance(4.0);
        let (w, x, c) = inputs(&spec, 6);
        let a = serial_diffusion(&spec, &sched, &w, &x, &c).unwrap();
        let b = serial_diffusion(&spec, &sched, &w, &x, &c).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!(p.x.bit_eq(&q.x));
        }
    }

    #[test]
    fn guidance_zero_is_unconditional() {
        let spec = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear);
        let (w, x, c) = inputs(&spec, 7);
        let guided = serial_diffusion(&spec, &DiffusionSpec::linear(3).with_guidance(0.0), &w, &x, &c).unwrap();
        let uncond = serial_diffusion(&spec, &DiffusionSpec::linear(3), &w, &x, &c.null_like()).unwrap();
        assert!(guided.last().unwrap().x.bit_eq(&uncond.last().unwrap().x));
    }

    #[test]
    fn text_permutation_leaves_image_outputs() {
        let spec = DiTSpec::desk(ConditioningMode::InContext, BlockTopology::USkip);
        let (w, x, c) = inputs(&spec, 8);
        let text = c.tensor();
        let perm: Vec<usize> = (0..spec.text_tokens).rev().collect();
        let permuted = Conditioning::InContext(text.gather_rows(&perm));
        let st = LatentState { x, t: 4 };
        let a = model_forward(&spec, &w, &st, &c).unwrap();
        let b = model_forward(&spec, &w, &st, &permuted).unwrap();
        assert!(a.rel_err(&b).unwrap() < 1e-12);
    }
}
