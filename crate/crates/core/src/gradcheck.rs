//! Central finite differences as an independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: crate::autodiff::Graph::backward

use serde::Serialize;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::{generate_sample, PairedSample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{batch_objective, similar_pairs, NormMode, ObjectiveSettings, ObjectiveVars, PerceptualExtractor};
use crate::trainer::{corrupt_batch, TrainJob};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively. Central differences at `eps = 1e-5` on an `O(1)` loss
/// carry roundoff near `1e-11`, so entries this small hold no relative signal.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every scalar in `params`.
pub fn fd_gradient<F>(f: F, params: &ParamStore, eps: f64) -> ParamStore
where
    F: Fn(&ParamStore) -> f64,
{
    fd_gradient_multi(|p| vec![f(p)], params, eps)
        .pop()
        .expect("one output")
}

/// Finite differences of a vector-valued function: one gradient map per output.
pub fn fd_gradient_multi<F>(f: F, params: &ParamStore, eps: f64) -> Vec<ParamStore>
where
    F: Fn(&ParamStore) -> Vec<f64>,
{
    assert!(eps > 0.0, "finite-difference eps must be positive");
    let outputs = f(params).len();
    let mut grads = vec![params.zeros_like(); outputs];
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).unwrap().values()[i];
            work.get_mut(name).unwrap().values_mut()[i] = orig + eps;
            let plus = f(&work);
            work.get_mut(name).unwrap().values_mut()[i] = orig - eps;
            let minus = f(&work);
            work.get_mut(name).unwrap().values_mut()[i] = orig;
            for (o, g) in grads.iter_mut().enumerate() {
                g.get_mut(name).unwrap().values_mut()[i] = (plus[o] - minus[o]) / (2.0 * eps);
            }
        }
    }
    grads
}

/// `max |a − n| / max(|a|, |n|, RELATIVE_FLOOR)` over every shared entry.
pub fn max_relative_error(analytic: &ParamStore, numeric: &ParamStore) -> f64 {
    max_relative_error_with_floor(analytic, numeric, RELATIVE_FLOOR)
}

/// Roundoff in `f(θ ± eps)` grows with `|f|`, so the floor below which
/// entries compare absolutely is `RELATIVE_FLOOR · max(1, |f|)`.
pub fn loss_scaled_floor(loss: f64) -> f64 {
    RELATIVE_FLOOR * loss.abs().max(1.0)
}

pub fn max_relative_error_with_floor(analytic: &ParamStore, numeric: &ParamStore, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let Some(n) = numeric.get(name) else { continue };
        for (x, y) in a.values().iter().zip(n.values()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Pass threshold on the maximum relative error of every loss term.
pub const TOLERANCE: f64 = 1e-4;

pub const TERMS: [&str; 6] = ["l_img_l1", "l_img_l2sq", "l_txt", "l_dom", "l_res", "l_total"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: String,
    pub max_relative_error: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub batch: Vec<String>,
    pub terms: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_relative_error < TOLERANCE)
    }
}

/// Reduced job used for checking: width 8, one layer per stack, two heads,
/// and the configured corpus geometry, corruption and loss weights.
pub fn reduced_job(job: &TrainJob) -> TrainJob {
    let model = ModelConfig { embed_dim: 8, heads: 2, vision_layers: 1, text_layers: 1, recon_layer: 1, decoder_layers: 1 };
    TrainJob { model, ..job.clone() }
}

/// One sample from each of the first two classes in each of the first two domains.
pub fn check_batch(job: &TrainJob) -> Result<Vec<PairedSample>> {
    let spec = &job.corpus;
    spec.validate()?;
    if spec.num_classes < 2 || spec.num_domains < 2 {
        return Err(Error::Argument("gradient check needs at least two classes and two domains".into()));
    }
    let mut out = Vec::with_capacity(4);
    for class in 0..2 {
        for domain in 0..2 {
            out.push(generate_sample(spec, job.seed, class, domain, 0)?);
        }
    }
    Ok(out)
}

fn term_vars(v: &ObjectiveVars, mode: NormMode) -> [Var; 6] {
    let (l1, l2) = match mode {
        NormMode::L1 => (v.img, v.img_alt),
        NormMode::L2sq => (v.img_alt, v.img),
    };
    [l1, l2, v.txt, v.dom, v.res, v.total]
}

/// Analytic gradients of every loss term against central differences on a
/// fixed corrupted 4-sample batch. Parameters are the reduced model's
/// initialization plus `N(0, 0.1²)` jitter so that no gradient path is
/// trivially small.
pub fn check_objective(job: &TrainJob) -> Result<GradcheckReport> {
    let job = reduced_job(job);
    job.validate()?;
    let model = job.model()?;
    let phi = PerceptualExtractor::for_model(&model);
    let mut params = job.init_params()?;
    let mut jitter = job.root_stream().fork("gradcheck");
    for (_, t) in params.iter_mut() {
        t.values_mut().iter_mut().for_each(|v| *v += 0.1 * jitter.normal());
    }
    let batch = check_batch(&job)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let items = corrupt_batch(&job, &batch, &idx, 0)?;
    let refs: Vec<&PairedSample> = batch.iter().collect();
    let pairs = similar_pairs(&refs, job.train.pair_mode);
    let settings = ObjectiveSettings { weights: job.train.weights, norm_mode: job.train.norm_mode };
    let evaluate = |p: &ParamStore| -> Result<(Graph, [Var; 6])> {
        let mut g = Graph::new();
        let (vars, _) = batch_objective(&mut g, &model, p, &phi, &items, &pairs, &settings)?;
        Ok((g, term_vars(&vars, settings.norm_mode)))
    };
    let (g, vars) = evaluate(&params)?;
    let analytic: Vec<ParamStore> = vars.iter().map(|&v| g.backward(v)).collect::<Result<_>>()?;
    let values: Vec<f64> = vars.iter().map(|&v| g.value(v).values()[0]).collect();
    let numeric = fd_gradient_multi(
        |p| {
            let (g, vars) = evaluate(p).expect("objective evaluates at perturbed parameters");
            vars.iter().map(|&v| g.value(v).values()[0]).collect()
        },
        &params,
        DEFAULT_EPS,
    );
    let terms = TERMS
        .iter()
        .enumerate()
        .map(|(i, name)| TermCheck {
            term: name.to_string(),
            max_relative_error: max_relative_error_with_floor(&analytic[i], &numeric[i], loss_scaled_floor(values[i])),
            value: values[i],
        })
        .collect();
    Ok(GradcheckReport { parameters: params.num_scalars(), batch: batch.into_iter().map(|s| s.id).collect(), terms })
}
