//! Finite-difference verification harness: every graph operation on small
//! random inputs, plus the whole network's loss with respect to every
//! parameter at a micro configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_graph_fn, numeric_gradient, GradCheckReport, DEFAULT_STEP};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::RunConfig;
use crate::data::generate;
use crate::error::Result;
use crate::model::{Architecture, Coen};
use crate::objectives::total_loss;
use crate::params::{stream_rng, streams, ParamStore, Session};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces `y` with fixed, distinct weights so every output entry matters.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let shape = g.shape(y).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.5 + ((i * 7) % 11) as f64 / 10.0).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn check_op(name: &str, inputs: Vec<Tensor>, op: OpFn) -> Result<GradCheckReport> {
    let named: Vec<(String, Tensor)> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("op.{name}[{i}]"), t))
        .collect();
    let refs: Vec<(&str, Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    check_graph_fn(&refs, DEFAULT_STEP, |g, v| {
        let y = op(g, v)?;
        weighted_sum(g, y)
    })
}

/// One report entry per input of every differentiable operation.
pub fn op_suite() -> Result<GradCheckReport> {
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![rand_t(&[3, 4], 1), rand_t(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![rand_t(&[2, 3], 3), rand_t(&[2, 3], 4)], |g, v| g.add(v[0], v[1])),
        ("sub", vec![rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![rand_t(&[2, 3], 7), rand_t(&[2, 3], 8)], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![rand_t(&[2, 3], 9)], |g, v| g.scale(v[0], -1.7)),
        ("add_row", vec![rand_t(&[3, 4], 10), rand_t(&[4], 11)], |g, v| g.add_row(v[0], v[1])),
        ("transpose", vec![rand_t(&[2, 5], 12)], |g, v| g.transpose(v[0])),
        ("concat_cols", vec![rand_t(&[3, 2], 13), rand_t(&[3, 4], 14)], |g, v| {
            g.concat_cols(&[v[0], v[1], v[0]])
        }),
        ("concat_rows", vec![rand_t(&[2, 3], 15), rand_t(&[1, 3], 16)], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        ("slice_rows", vec![rand_t(&[5, 3], 17)], |g, v| g.slice_rows(v[0], 1, 3)),
        ("slice_cols", vec![rand_t(&[3, 6], 18)], |g, v| g.slice_cols(v[0], 2, 3)),
        ("gelu", vec![rand_t(&[3, 4], 19).map(|x| 3.0 * x)], |g, v| g.gelu(v[0])),
        ("relu", vec![Tensor::from_rows(&[&[0.5, -0.3, 1.2], &[-2.0, 0.1, 0.7]])], |g, v| g.relu(v[0])),
        ("sum", vec![rand_t(&[3, 4], 20)], |g, v| g.sum(v[0])),
        ("mean", vec![rand_t(&[3, 4], 21)], |g, v| g.mean(v[0])),
        ("mean_rows", vec![rand_t(&[3, 4], 22)], |g, v| g.mean_rows(v[0])),
        ("softmax_rows", vec![rand_t(&[3, 5], 23)], |g, v| g.softmax_rows(v[0])),
        ("log_softmax_rows", vec![rand_t(&[3, 5], 24)], |g, v| g.log_softmax_rows(v[0])),
        ("l2_normalize_rows", vec![rand_t(&[3, 4], 25)], |g, v| g.l2_normalize_rows(v[0])),
        (
            "layer_norm",
            vec![rand_t(&[2, 8], 26), rand_t(&[8], 27).map(|v| 1.0 + 0.5 * v), rand_t(&[8], 28)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        ("dropout", vec![rand_t(&[4, 6], 29)], |g, v| {
            g.dropout(v[0], 0.5, true, &mut ChaCha8Rng::seed_from_u64(7))
        }),
        ("pairwise_dist", vec![rand_t(&[4, 3], 30)], |g, v| g.pairwise_dist(v[0])),
        ("gather", vec![rand_t(&[3, 3], 31)], |g, v| g.gather(v[0], &[0, 4, 4, 8])),
    ];
    let mut report = GradCheckReport::default();
    for (name, inputs, op) in cases {
        report.merge(check_op(name, inputs, op)?);
    }
    Ok(report)
}

/// Micro configuration for the end-to-end check: 16×32 images in 8×8
/// patches (8 tokens), width 16, depth 2, two identities with two samples.
pub fn micro_config() -> RunConfig {
    let overrides = [
        "model.image_h=16",
        "model.image_w=32",
        "model.patch=8",
        "model.embed_dim=16",
        "model.heads=2",
        "model.depth=2",
        "data.synth.height=16",
        "data.synth.width=32",
        "data.synth.n_identities=2",
        "data.synth.train_per_id=2",
        "data.synth.query_per_id=0",
        "data.synth.gallery_per_id=0",
        "train.batch_p=2",
        "train.batch_k=2",
    ];
    RunConfig::default()
        .with_overrides(&overrides)
        .expect("micro overrides are valid")
}

#[derive(Clone, Debug)]
pub struct ModelCheckOptions {
    /// Entries checked per parameter tensor, spread evenly; `None` checks all.
    pub max_entries: Option<usize>,
    pub step: f64,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            max_entries: None,
            step: DEFAULT_STEP,
        }
    }
}

/// Loss of the whole network on the micro training batch, dropout included
/// with a fixed mask stream.
struct MicroProblem {
    model: Coen,
    store: ParamStore,
    samples: Vec<crate::data::Sample>,
    cfg: RunConfig,
}

impl MicroProblem {
    fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate(&cfg.data.synth)?;
        let arch = Architecture {
            model: cfg.model.clone(),
            proxy: cfg.proxy.clone(),
            cem: cfg.cem.clone(),
            classes: data.train.n_classes(),
        };
        let mut store = ParamStore::new();
        let model = Coen::new(&mut store, arch, &mut stream_rng(cfg.seed, streams::INIT, 0))?;
        // Freshly initialised weights leave the network nearly linear around
        // zero; a wider draw exercises every nonlinearity.
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.ends_with(".weight") || name.starts_with("cem.") || name.ends_with("_token") || name.ends_with("_embed") {
                let mut rng = stream_rng(cfg.seed, streams::INIT, 1 + id.index() as u64);
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::uniform(&shape, -0.3, 0.3, &mut rng);
            }
        }
        Ok(Self {
            model,
            store,
            samples: data.train.samples,
            cfg: cfg.clone(),
        })
    }

    fn loss(&self, store: &ParamStore, want_grads: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut s = Session::new(store, true, stream_rng(self.cfg.seed, streams::DROPOUT, 0));
        let refs: Vec<&crate::data::Sample> = self.samples.iter().collect();
        let labels: Vec<usize> = self.samples.iter().map(|x| x.label).collect();
        let out = self.model.forward_batch(&mut s, &refs)?;
        let (total, _) = total_loss(&mut s, &out.features, &self.model.heads, &labels, &self.cfg.loss, 1.0)?;
        let value = s.graph.value(total).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        s.graph.backward(total)?;
        Ok((value, s.grads()))
    }
}

fn spread(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// End-to-end check of the total loss against every parameter.
/// `tamper` may alter the analytic gradients before comparison; the
/// harness's own tests use it to confirm that a broken backward fails.
pub fn model_gradcheck_with(
    cfg: &RunConfig,
    opts: &ModelCheckOptions,
    tamper: impl Fn(&str, &mut Tensor),
) -> Result<GradCheckReport> {
    let problem = MicroProblem::new(cfg)?;
    let (_, mut analytic) = problem.loss(&problem.store, true)?;
    let mut report = GradCheckReport::default();
    let mut work = problem.store.clone();
    for (id, grad) in problem.store.ids().zip(&mut analytic) {
        let name = problem.store.name(id).to_string();
        tamper(&name, grad);
        let picks = spread(grad.numel(), opts.max_entries);
        let original = problem.store.get(id).clone();
        let mut base: Vec<Tensor> = vec![Tensor::zeros(&[picks.len()])];
        let numeric = numeric_gradient(&base, opts.step, |ts| {
            let mut t = original.clone();
            for (k, &i) in picks.iter().enumerate() {
                t.data_mut()[i] += ts[0].data()[k];
            }
            *work.get_mut(id) = t;
            problem.loss(&work, false).map(|(v, _)| v)
        })?;
        *work.get_mut(id) = original;
        let analytic_picked = Tensor::new(vec![picks.len()], picks.iter().map(|&i| grad.data()[i]).collect())?;
        base[0] = analytic_picked;
        report.merge(GradCheckReport::compare(&[name], &base, &numeric));
    }
    Ok(report)
}

pub fn model_gradcheck(cfg: &RunConfig, opts: &ModelCheckOptions) -> Result<GradCheckReport> {
    model_gradcheck_with(cfg, opts, |_, _| {})
}
