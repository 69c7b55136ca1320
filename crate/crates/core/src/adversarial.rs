//! Adversarial training of deformation generators against a structural-graph
//! discriminator.
//!
//! The discriminator is a 35 -> h -> 1 perceptron (tanh, sigmoid) trained by
//! exact backprop and Adam ascent on
//! `mean log D(real) + mean log(1 - D(generated))`. Each generator is a
//! control-grid field updated by simultaneous-perturbation gradient
//! estimates of its total loss, since warping, thresholding and the
//! structure loss are not differentiable.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{
    apply_deformation, content_loss, project_topology, template_field, DeformationField, Template,
};
use crate::error::{Error, Result};
use crate::graph::{
    graph_features, mask_graph, mask_graph_aligned, structure_loss, GraphFeatures, GraphParams,
    StructuralGraph, FEATURE_DIM,
};
use crate::mask::BinaryMask;
use crate::topology::{topology, TopologySignature};

pub const DEFAULT_LAMBDA1: f64 = 0.8;
pub const DEFAULT_LAMBDA2: f64 = 0.5;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Perceptron weights stored flat as `[w1 (35 x h, input-major), b1 (h), w2 (h), b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorState {
    hidden: usize,
    params: Vec<f64>,
}

impl DiscriminatorState {
    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::param("discriminator hidden size must be >= 1"));
        }
        Ok(Self {
            hidden,
            params: vec![0.0; Self::param_len(hidden)],
        })
    }

    /// Uniform Glorot-style initialisation; biases start at zero.
    pub fn random(hidden: usize, seed: u64) -> Result<Self> {
        let mut d = Self::zeros(hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = (6.0 / (FEATURE_DIM + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let (w1, rest) = d.params.split_at_mut(FEATURE_DIM * hidden);
        for w in w1 {
            *w = rng.gen_range(-a1..a1);
        }
        for w in &mut rest[hidden..2 * hidden] {
            *w = rng.gen_range(-a2..a2);
        }
        Ok(d)
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Result<Self> {
        if hidden == 0 || params.len() != Self::param_len(hidden) {
            return Err(Error::param(format!(
                "expected {} parameters for hidden size {hidden}, got {}",
                Self::param_len(hidden.max(1)),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("discriminator weights must be finite"));
        }
        Ok(Self { hidden, params })
    }

    pub fn param_len(hidden: usize) -> usize {
        FEATURE_DIM * hidden + 2 * hidden + 1
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1(&self, i: usize, j: usize) -> f64 {
        self.params[i * self.hidden + j]
    }

    fn b1(&self, j: usize) -> f64 {
        self.params[FEATURE_DIM * self.hidden + j]
    }

    fn w2(&self, j: usize) -> f64 {
        self.params[FEATURE_DIM * self.hidden + self.hidden + j]
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Hidden activations and output logit.
    fn activations(&self, f: &[f64]) -> (Vec<f64>, f64) {
        let h = self.hidden;
        let mut pre: Vec<f64> = (0..h).map(|j| self.b1(j)).collect();
        for (i, &x) in f.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.params[i * h..(i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += w * x;
            }
        }
        let a: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
        let z = self.b2()
            + a.iter()
                .enumerate()
                .map(|(j, v)| self.w2(j) * v)
                .sum::<f64>();
        (a, z)
    }

    /// Output logit `z`, with `D = sigmoid(z)`.
    pub fn logit(&self, f: &GraphFeatures) -> f64 {
        self.activations(f.as_slice()).1
    }

    /// Adds `scale * dz/dparams` at input `f` into `grad`.
    fn accumulate_logit_grad(&self, f: &[f64], scale: f64, grad: &mut [f64]) {
        let h = self.hidden;
        let (a, _) = self.activations(f);
        let b1 = FEATURE_DIM * h;
        let w2 = b1 + h;
        for j in 0..h {
            let back = scale * self.w2(j) * (1.0 - a[j] * a[j]);
            grad[w2 + j] += scale * a[j];
            grad[b1 + j] += back;
            for (i, &x) in f.iter().enumerate() {
                grad[i * h + j] += back * x;
            }
        }
        grad[w2 + h] += scale;
    }

    /// `dD/df` at input `f`.
    pub fn input_gradient(&self, f: &GraphFeatures) -> [f64; FEATURE_DIM] {
        let (a, z) = self.activations(f.as_slice());
        let s = sigmoid(z);
        let ds = s * (1.0 - s);
        let mut g = [0.0; FEATURE_DIM];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = ds
                * (0..self.hidden)
                    .map(|j| self.w2(j) * (1.0 - a[j] * a[j]) * self.w1(i, j))
                    .sum::<f64>();
        }
        g
    }

    /// `dD/dparams` at input `f`.
    pub fn param_gradient(&self, f: &GraphFeatures) -> Vec<f64> {
        let s = sigmoid(self.logit(f));
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_logit_grad(f.as_slice(), s * (1.0 - s), &mut g);
        g
    }
}

/// `sigmoid(W2 . tanh(W1^T f + b1) + b2)`, in (0, 1).
pub fn disc_forward(d: &DiscriminatorState, f: &GraphFeatures) -> f64 {
    sigmoid(d.logit(f))
}

/// [`disc_forward`] on a raw slice, checking its length.
pub fn disc_forward_slice(d: &DiscriminatorState, f: &[f64]) -> Result<f64> {
    let arr: [f64; FEATURE_DIM] = f
        .try_into()
        .map_err(|_| Error::param(format!("expected {FEATURE_DIM} features, got {}", f.len())))?;
    Ok(disc_forward(d, &GraphFeatures(arr)))
}

/// `mean log D(real) + mean log(1 - D(generated))`.
pub fn disc_loss(
    d: &DiscriminatorState,
    real: &[GraphFeatures],
    gen: &[GraphFeatures],
) -> Result<f64> {
    if real.is_empty() || gen.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let r = real.iter().map(|f| -softplus(-d.logit(f))).sum::<f64>() / real.len() as f64;
    Ok(r + gen_adversarial_loss(d, gen)?)
}

/// Gradient of [`disc_loss`] with respect to the discriminator parameters.
pub fn disc_loss_gradient(
    d: &DiscriminatorState,
    real: &[GraphFeatures],
    gen: &[GraphFeatures],
) -> Result<Vec<f64>> {
    if real.is_empty() || gen.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = vec![0.0; d.params.len()];
    // d/dz log sigmoid(z) = 1 - D; d/dz log(1 - sigmoid(z)) = -D
    for f in real {
        let s = sigmoid(d.logit(f));
        d.accumulate_logit_grad(f.as_slice(), (1.0 - s) / real.len() as f64, &mut g);
    }
    for f in gen {
        let s = sigmoid(d.logit(f));
        d.accumulate_logit_grad(f.as_slice(), -s / gen.len() as f64, &mut g);
    }
    Ok(g)
}

/// `mean log(1 - D(generated))`.
pub fn gen_adversarial_loss(d: &DiscriminatorState, gen: &[GraphFeatures]) -> Result<f64> {
    if gen.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(gen.iter().map(|f| -softplus(d.logit(f))).sum::<f64>() / gen.len() as f64)
}

/// Fraction of real samples scored above 0.5 and generated ones below.
pub fn disc_accuracy(d: &DiscriminatorState, real: &[GraphFeatures], gen: &[GraphFeatures]) -> f64 {
    let n = real.len() + gen.len();
    if n == 0 {
        return 0.0;
    }
    let hits = real.iter().filter(|f| d.logit(f) > 0.0).count()
        + gen.iter().filter(|f| d.logit(f) < 0.0).count();
    hits as f64 / n as f64
}

/// Adam moments for gradient ascent on the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Moves `params` by `lr` along the bias-corrected ascent direction of `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            *p += lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// One ascent step of the discriminator objective; returns the objective
/// before the step.
pub fn disc_step(
    d: &mut DiscriminatorState,
    opt: &mut Adam,
    real: &[GraphFeatures],
    gen: &[GraphFeatures],
    lr: f64,
) -> Result<f64> {
    let value = disc_loss(d, real, gen)?;
    let g = disc_loss_gradient(d, real, gen)?;
    opt.ascend(&mut d.params, &g, lr);
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan: f64,
    pub content: f64,
    pub structure: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `total = gan + lambda1 * content + lambda2 * structure`.
pub fn total_loss(
    gan: f64,
    content: f64,
    structure: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossReport> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::param(format!(
            "balancing factors must be >= 0, got {lambda1} and {lambda2}"
        )));
    }
    Ok(LossReport {
        gan,
        content,
        structure,
        total: gan + lambda1 * content + lambda2 * structure,
        lambda1,
        lambda2,
    })
}

/// One row of the training trace; step 0 is the initial evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    pub disc_accuracy: f64,
}

/// Trace as CSV with columns `step,gan,content,structure,total`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,gan,content,structure,total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.report.gan, r.report.content, r.report.structure, r.report.total
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Discriminator steps per generator step.
    pub k_d: usize,
    pub disc_lr: f64,
    /// Largest per-parameter generator move per step, in pixels.
    pub gen_lr: f64,
    pub gen_steps: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Displacement cap as a fraction of min(W, H).
    pub cap_fraction: f64,
    pub variants_per_source: usize,
    pub hidden: usize,
    /// SPSA perturbation size in pixels.
    pub spsa_delta: f64,
    pub spsa_pairs: usize,
    /// Peak template displacement in pixels.
    pub template_amplitude: f64,
    /// Uniform per-control-point noise added to the template, in pixels.
    pub template_noise: f64,
    pub graph: GraphParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            k_d: 2,
            disc_lr: 1e-2,
            gen_lr: 0.2,
            gen_steps: 200,
            grid_w: 5,
            grid_h: 5,
            cap_fraction: 0.15,
            variants_per_source: 5,
            hidden: 32,
            spsa_delta: 0.5,
            spsa_pairs: 4,
            template_amplitude: 3.0,
            template_noise: 1.0,
            graph: GraphParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("disc_lr", self.disc_lr),
            ("gen_lr", self.gen_lr),
            ("template_amplitude", self.template_amplitude),
            ("template_noise", self.template_noise),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 0.5) {
            return Err(Error::param("cap_fraction must lie in (0, 0.5]"));
        }
        if !(self.spsa_delta > 0.0 && self.spsa_delta.is_finite()) {
            return Err(Error::param("spsa_delta must be > 0"));
        }
        if self.spsa_pairs == 0 || self.hidden == 0 {
            return Err(Error::param("spsa_pairs and hidden must be >= 1"));
        }
        if self.grid_w < 2 || self.grid_h < 2 || 2 * self.grid_w * self.grid_h > 50 {
            return Err(Error::param(
                "control grid must be at least 2x2 with at most 25 points",
            ));
        }
        if self.graph.n_v < 3 {
            return Err(Error::param("n_v must be >= 3"));
        }
        self.graph.canny.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    pub field: DeformationField,
    pub noise_seed: u64,
    /// Carried as metadata; it only selects the initial template.
    pub prompt: String,
    pub template: Template,
    pub step: usize,
    pub source: usize,
    pub variant: usize,
}

/// Source-side data shared by all generators of one mask.
struct Reference {
    mask: BinaryMask,
    topo: TopologySignature,
    graph: StructuralGraph,
    features: GraphFeatures,
}

/// One evaluated generator output.
#[derive(Debug, Clone)]
struct Evaluation {
    mask: BinaryMask,
    features: GraphFeatures,
    content: f64,
    structure: f64,
}

impl Evaluation {
    /// Generator objective: the terms of the total loss that depend on it.
    fn objective(&self, d: &DiscriminatorState, cfg: &TrainConfig) -> f64 {
        -softplus(d.logit(&self.features))
            + cfg.lambda1 * self.content
            + cfg.lambda2 * self.structure
    }
}

/// `mask` must already share the source topology.
fn evaluate(r: &Reference, mask: BinaryMask, cfg: &TrainConfig) -> Option<Evaluation> {
    let g = mask_graph_aligned(&mask, &r.graph.allocation(), &cfg.graph).ok()?;
    let structure = structure_loss(&g, &r.graph).ok()?;
    let content = content_loss(&mask, &r.mask).ok()?;
    let features = graph_features(&g, &r.topo);
    Some(Evaluation {
        mask,
        features,
        content,
        structure,
    })
}

/// Evaluates `field` on `r` without projection; topology changes and
/// untraceable results score `None` (an infinite loss).
fn probe(r: &Reference, field: &DeformationField, cfg: &TrainConfig) -> Option<Evaluation> {
    let m = apply_deformation(&r.mask, field).ok()?;
    if topology(&m) != r.topo {
        return None;
    }
    evaluate(r, m, cfg)
}

/// Projects `field` onto a topology-preserving edit. `None` when only the
/// undeformed source satisfies the constraint.
fn project(
    r: &Reference,
    field: &DeformationField,
    cfg: &TrainConfig,
) -> Option<(DeformationField, Evaluation)> {
    let edited = apply_deformation(&r.mask, field).ok()?;
    let p = project_topology(&r.mask, &edited, field).ok()?;
    if p.fallback {
        return None;
    }
    let e = evaluate(r, p.mask, cfg)?;
    Some((p.field, e))
}

struct Generator {
    state: GeneratorState,
    eval: Evaluation,
}

impl Generator {
    /// One SPSA descent step against discriminator `d`.
    fn step(&mut self, r: &Reference, d: &DiscriminatorState, cfg: &TrainConfig) {
        self.state.step += 1;
        if cfg.gen_lr == 0.0 {
            return;
        }
        let theta = self.state.field.params();
        let n = theta.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.noise_seed);
        rng.set_stream(self.state.step as u64);
        let mut grad = vec![0.0; n];
        let mut used = 0usize;
        for _ in 0..cfg.spsa_pairs {
            let delta: Vec<f64> = (0..n)
                .map(|_| if rng.next_u32() & 1 == 0 { 1.0 } else { -1.0 })
                .collect();
            let shifted = |sign: f64| -> Option<f64> {
                let p: Vec<f64> = theta
                    .iter()
                    .zip(&delta)
                    .map(|(t, s)| t + sign * cfg.spsa_delta * s)
                    .collect();
                let f = self.state.field.with_params(&p).ok()?;
                probe(r, &f, cfg).map(|e| e.objective(d, cfg))
            };
            let (Some(plus), Some(minus)) = (shifted(1.0), shifted(-1.0)) else {
                continue;
            };
            let diff = (plus - minus) / (2.0 * cfg.spsa_delta);
            for (g, s) in grad.iter_mut().zip(&delta) {
                *g += diff * s;
            }
            used += 1;
        }
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if used == 0 || scale == 0.0 {
            return;
        }
        let candidate: Vec<f64> = theta
            .iter()
            .zip(&grad)
            .map(|(t, g)| t - cfg.gen_lr * g / scale)
            .collect();
        let Ok(field) = self.state.field.with_params(&candidate) else {
            return;
        };
        if let Some((field, eval)) = project(r, &field, cfg) {
            self.state.field = field;
            self.eval = eval;
        }
    }
}

/// Result of [`train`]. `generators[k]` produced `masks[k]`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generators: Vec<GeneratorState>,
    pub masks: Vec<BinaryMask>,
    pub discriminator: DiscriminatorState,
    pub trace: Vec<TraceRow>,
}

/// Independent 64-bit seed for `stream` under `seed`.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn report(
    d: &DiscriminatorState,
    refs: &[Reference],
    gens: &[Generator],
    cfg: &TrainConfig,
    step: usize,
) -> Result<TraceRow> {
    let real: Vec<GraphFeatures> = refs.iter().map(|r| r.features).collect();
    let fake: Vec<GraphFeatures> = gens.iter().map(|g| g.eval.features).collect();
    let n = gens.len() as f64;
    let content = gens.iter().map(|g| g.eval.content).sum::<f64>() / n;
    let structure = gens.iter().map(|g| g.eval.structure).sum::<f64>() / n;
    let rep = total_loss(
        disc_loss(d, &real, &fake)?,
        content,
        structure,
        cfg.lambda1,
        cfg.lambda2,
    )?;
    if !rep.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "gan={} content={} structure={}",
                rep.gan, rep.content, rep.structure
            ),
        });
    }
    Ok(TraceRow {
        step,
        report: rep,
        disc_accuracy: disc_accuracy(d, &real, &fake),
    })
}

/// Alternating adversarial training of one generator per (source, variant).
///
/// Each step runs `k_d` discriminator ascent steps, then one generator step
/// for every generator. A generator update whose projected edit changes the
/// source topology is rejected. The trace holds the initial evaluation
/// followed by one row per step.
pub fn train(
    sources: &[BinaryMask],
    prompts: &[String],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !prompts.is_empty() && prompts.len() != sources.len() {
        return Err(Error::param(format!(
            "{} prompts for {} sources",
            prompts.len(),
            sources.len()
        )));
    }
    let refs: Vec<Reference> = sources
        .iter()
        .map(|m| {
            let graph = mask_graph(m, &cfg.graph)?;
            let topo = topology(m);
            Ok(Reference {
                mask: m.clone(),
                topo,
                features: graph_features(&graph, &topo),
                graph,
            })
        })
        .collect::<Result<_>>()?;

    let mut gens = Vec::new();
    for (s, r) in refs.iter().enumerate() {
        let (w, h) = r.mask.dims();
        let cap = cfg.cap_fraction * w.min(h) as f64;
        let base = DeformationField::zeros(cfg.grid_w, cfg.grid_h, w, h, cap)?;
        let prompt = prompts.get(s).cloned().unwrap_or_default();
        let template = Template::from_prompt(&prompt);
        for v in 0..cfg.variants_per_source {
            let noise_seed = derive_seed(cfg.seed, 1 + (s * cfg.variants_per_source + v) as u64);
            let init = template_field(
                &base,
                template,
                cfg.template_amplitude,
                cfg.template_noise,
                noise_seed,
            );
            let (field, eval) = match project(r, &init, cfg) {
                Some(p) => p,
                None => (
                    base.clone(),
                    evaluate(r, r.mask.clone(), cfg).ok_or(Error::NoContours)?,
                ),
            };
            gens.push(Generator {
                state: GeneratorState {
                    field,
                    noise_seed,
                    prompt: prompt.clone(),
                    template,
                    step: 0,
                    source: s,
                    variant: v,
                },
                eval,
            });
        }
    }

    let mut d = DiscriminatorState::random(cfg.hidden, derive_seed(cfg.seed, 0))?;
    let mut opt = Adam::new(d.params().len());
    let real: Vec<GraphFeatures> = refs.iter().map(|r| r.features).collect();
    let mut trace = Vec::with_capacity(cfg.gen_steps + 1);
    if gens.is_empty() {
        return Ok(TrainOutcome {
            generators: Vec::new(),
            masks: Vec::new(),
            discriminator: d,
            trace,
        });
    }
    trace.push(report(&d, &refs, &gens, cfg, 0)?);
    for step in 1..=cfg.gen_steps {
        let fake: Vec<GraphFeatures> = gens.iter().map(|g| g.eval.features).collect();
        for _ in 0..cfg.k_d {
            disc_step(&mut d, &mut opt, &real, &fake, cfg.disc_lr)?;
        }
        if d.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "discriminator weights diverged".into(),
            });
        }
        gens.par_iter_mut()
            .for_each(|g| g.step(&refs[g.state.source], &d, cfg));
        trace.push(report(&d, &refs, &gens, cfg, step)?);
    }
    let masks = gens.iter().map(|g| g.eval.mask.clone()).collect();
    Ok(TrainOutcome {
        generators: gens.into_iter().map(|g| g.state).collect(),
        masks,
        discriminator: d,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(seed: u64) -> GraphFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = [0.0; FEATURE_DIM];
        for v in &mut f {
            *v = rng.gen_range(-1.0..1.0);
        }
        GraphFeatures(f)
    }

    #[test]
    fn zero_weights_give_one_half() {
        let d = DiscriminatorState::zeros(32).unwrap();
        assert_eq!(disc_forward(&d, &features(1)), 0.5);
        let batch = [features(1), features(2)];
        let expected = -2.0 * std::f64::consts::LN_2;
        assert!((disc_loss(&d, &batch, &batch).unwrap() - expected).abs() < 1e-12);
        assert!((gen_adversarial_loss(&d, &batch).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn outputs_stay_in_open_interval() {
        for seed in 0..1000 {
            let d = DiscriminatorState::random(8, seed).unwrap();
            let y = disc_forward(&d, &features(seed + 7));
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn losses_match_hand_summation() {
        let d = DiscriminatorState::random(6, 3).unwrap();
        let real = [features(10), features(11), features(12)];
        let gen = [features(20), features(21), features(22)];
        let dr: Vec<f64> = real.iter().map(|f| disc_forward(&d, f)).collect();
        let dg: Vec<f64> = gen.iter().map(|f| disc_forward(&d, f)).collect();
        let g = ((1.0 - dg[0]).ln() + (1.0 - dg[1]).ln() + (1.0 - dg[2]).ln()) / 3.0;
        let r = (dr[0].ln() + dr[1].ln() + dr[2].ln()) / 3.0;
        assert!((gen_adversarial_loss(&d, &gen).unwrap() - g).abs() < 1e-12);
        assert!((disc_loss(&d, &real, &gen).unwrap() - (r + g)).abs() < 1e-12);
        assert!(matches!(disc_loss(&d, &[], &gen), Err(Error::EmptyBatch)));
        assert!(matches!(
            gen_adversarial_loss(&d, &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn slice_forward_checks_length() {
        let d = DiscriminatorState::zeros(4).unwrap();
        assert!(disc_forward_slice(&d, &[0.0; 34]).is_err());
        assert_eq!(disc_forward_slice(&d, &[0.0; 35]).unwrap(), 0.5);
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = total_loss(-0.5, 0.25, 0.1, 0.8, 0.5).unwrap();
        assert!((r.total + 0.25).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.8, 0.5).unwrap().total, 0.0);
        assert!(total_loss(0.0, 0.0, 0.0, -0.1, 0.5).is_err());
        let d = TrainConfig::default();
        assert_eq!((d.lambda1, d.lambda2), (0.8, 0.5));
    }

    #[test]
    fn adam_ascends() {
        let d0 = DiscriminatorState::random(8, 5).unwrap();
        let real = [features(1), features(2), features(3)];
        let gen = [features(4), features(5), features(6)];
        let mut d = d0.clone();
        let mut opt = Adam::new(d.params().len());
        let before = disc_loss(&d, &real, &gen).unwrap();
        for _ in 0..50 {
            disc_step(&mut d, &mut opt, &real, &gen, 1e-2).unwrap();
        }
        assert!(disc_loss(&d, &real, &gen).unwrap() > before);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let row = TraceRow {
            step: 3,
            report: total_loss(-1.0, 0.5, 0.25, 0.8, 0.5).unwrap(),
            disc_accuracy: 0.5,
        };
        let csv = trace_csv(&[row]);
        assert_eq!(csv.lines().next(), Some("step,gan,content,structure,total"));
        assert_eq!(csv.lines().nth(1), Some("3,-1,0.5,0.25,-0.475"));
    }
}
