//! Multi-stage refinement in frequency space.
//!
//! Each stage moves the current prediction (and, optionally, the motion
//! summary) into DCT coefficients, adds the output of a graph-learning
//! module, and converts back. Channel tensors are `[B×P×T]`.

use rand::RngCore;

use crate::autodiff::{RunningStats, Var};
use crate::error::{Error, Result};
use crate::params::NormStore;
use crate::params::{fan_in_uniform, Forward, NormId, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transforms::DctBasis;

#[derive(Debug, Clone)]
pub struct BlockNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: NormId,
}

/// One graph convolution `A·G·W`, optionally followed by the
/// norm/tanh/dropout tail of a graph-learning block.
#[derive(Debug, Clone)]
pub struct GraphLayer {
    pub adjacency: ParamId,
    pub weight: ParamId,
    pub norm: Option<BlockNorm>,
    pub nodes: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl GraphLayer {
    fn init_block(
        store: &mut ParamStore,
        norms: &mut NormStore,
        name: &str,
        nodes: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut layer = Self::init_gc(store, name, nodes, c_in, c_out, rng);
        layer.norm = Some(BlockNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([c_out])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([c_out])),
            stats: norms.add(format!("{name}.stats"), RunningStats::identity(c_out)),
        });
        layer
    }

    fn init_gc(
        store: &mut ParamStore,
        name: &str,
        nodes: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        GraphLayer {
            adjacency: store.add(format!("{name}.adjacency"), fan_in_uniform(&[nodes, nodes], nodes, rng)),
            weight: store.add(format!("{name}.weight"), fan_in_uniform(&[c_in, c_out], c_in, rng)),
            norm: None,
            nodes,
            c_in,
            c_out,
        }
    }
}

/// `A·G·W` on `[P×c_in]` or `[B×P×c_in]`.
pub fn graph_conv(f: &mut Forward<'_>, input: Var, layer: &GraphLayer) -> Result<Var> {
    let shape = f.tape.value(input).shape().to_vec();
    let n = shape.len();
    if n < 2 || shape[n - 2] != layer.nodes || shape[n - 1] != layer.c_in {
        return Err(Error::dim(
            "graph_conv",
            format!("expected [..×{}×{}], got {shape:?}", layer.nodes, layer.c_in),
        ));
    }
    let mixed = f.tape.matmul(f.var(layer.adjacency), input)?;
    f.tape.matmul(mixed, f.var(layer.weight))
}

/// GC, batch norm over the output channels, tanh, dropout.
pub fn graph_learning_block(f: &mut Forward<'_>, input: Var, layer: &GraphLayer, dropout: f64) -> Result<Var> {
    let norm = layer
        .norm
        .as_ref()
        .ok_or_else(|| Error::Config("graph learning block needs batch-norm parameters".into()))?;
    let h = graph_conv(f, input, layer)?;
    let axis = f.tape.value(h).ndim() - 1;
    let (gamma, beta) = (f.var(norm.gamma), f.var(norm.beta));
    let h = f
        .tape
        .batchnorm(h, gamma, beta, axis, f.norms.get_mut(norm.stats), f.mode, f.batchnorm)?;
    let h = f.tape.tanh(h)?;
    f.tape.dropout(h, dropout, f.mode, &mut *f.rng)
}

/// Graph-learning module: entry block, residual pairs, then a bare GC back
/// to the input width.
#[derive(Debug, Clone)]
pub struct Glm {
    pub entry: GraphLayer,
    pub pairs: Vec<[GraphLayer; 2]>,
    pub output: GraphLayer,
}

impl Glm {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        norms: &mut NormStore,
        name: &str,
        nodes: usize,
        width: usize,
        latent: usize,
        pairs: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let entry = GraphLayer::init_block(store, norms, &format!("{name}.entry"), nodes, width, latent, rng);
        let pairs = (0..pairs)
            .map(|m| {
                [0, 1].map(|k| {
                    GraphLayer::init_block(store, norms, &format!("{name}.pair{m}.{k}"), nodes, latent, latent, rng)
                })
            })
            .collect();
        let output = GraphLayer::init_gc(store, &format!("{name}.output"), nodes, latent, width, rng);
        // zero weight makes the module output zero; the adjacency stays
        // random so the weight still receives a gradient
        *store.get_mut(output.weight) = Tensor::zeros([latent, width]);
        Glm { entry, pairs, output }
    }

    /// Number of graph-learning blocks, `1 + 2M`.
    pub fn block_count(&self) -> usize {
        1 + 2 * self.pairs.len()
    }

    pub fn width(&self) -> usize {
        self.entry.c_in
    }
}

pub fn glm_forward(f: &mut Forward<'_>, input: Var, glm: &Glm, dropout: f64) -> Result<Var> {
    let shape = f.tape.value(input).shape().to_vec();
    if shape.last() != Some(&glm.width()) {
        return Err(Error::dim(
            "glm_forward",
            format!("expected {} channels, got {shape:?}", glm.width()),
        ));
    }
    let mut h = graph_learning_block(f, input, &glm.entry, dropout)?;
    for [first, second] in &glm.pairs {
        let inner = graph_learning_block(f, h, first, dropout)?;
        let inner = graph_learning_block(f, inner, second, dropout)?;
        h = f.tape.add(inner, h)?;
    }
    graph_conv(f, h, &glm.output)
}

/// Repeats the last of `L` query frames `F` times.
pub fn pad_query(f: &mut Forward<'_>, query: Var, future: usize) -> Result<Var> {
    f.tape.pad_last(query, future)
}

/// Splits the last axis into equal halves.
pub fn split_channels(f: &mut Forward<'_>, g: Var) -> Result<(Var, Var)> {
    let width = *f.tape.value(g).shape().last().unwrap_or(&0);
    if !width.is_multiple_of(2) {
        return Err(Error::dim("split_channels", format!("odd width {width}")));
    }
    let half = width / 2;
    Ok((f.tape.slice_last(g, 0, half)?, f.tape.slice_last(g, half, half)?))
}

#[derive(Debug, Clone)]
pub struct RefinementParams {
    pub stages: Vec<Glm>,
    pub query_len: usize,
    pub future_len: usize,
    /// Concatenate the motion summary with the prediction in every stage.
    pub use_summary: bool,
    pub dropout: f64,
}

impl RefinementParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        norms: &mut NormStore,
        nodes: usize,
        query_len: usize,
        future_len: usize,
        stages: usize,
        pairs: usize,
        latent: usize,
        use_summary: bool,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if stages == 0 || latent == 0 || query_len == 0 {
            return Err(Error::Config(format!(
                "refinement needs N ≥ 1, d ≥ 1 and L ≥ 1 (got {stages}, {latent}, {query_len})"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {dropout}")));
        }
        let frames = query_len + future_len;
        let width = if use_summary { 2 * frames } else { frames };
        let stages = (0..stages)
            .map(|n| Glm::init(store, norms, &format!("stage{n}"), nodes, width, latent, pairs, rng))
            .collect();
        Ok(RefinementParams {
            stages,
            query_len,
            future_len,
            use_summary,
            dropout,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Refined {
    /// `X_N`, `[B×P×(L+F)]`.
    pub prediction: Var,
    /// `X_1 … X_N`.
    pub stages: Vec<Var>,
    /// `S_1 … S_N` (empty without summary concatenation).
    pub summaries: Vec<Var>,
}

/// Runs every stage on `query` (`[B×P×L]`), with `summary`
/// (`[B×P×(L+F)]`) concatenated in front of the prediction when enabled.
pub fn refine(
    f: &mut Forward<'_>,
    query: Var,
    summary: Option<Var>,
    params: &RefinementParams,
    basis: &DctBasis,
) -> Result<Refined> {
    let frames = params.query_len + params.future_len;
    if basis.size() != frames {
        return Err(Error::Config(format!(
            "DCT basis of size {} for {frames} frames",
            basis.size()
        )));
    }
    let q_len = *f.tape.value(query).shape().last().unwrap_or(&0);
    if q_len != params.query_len {
        return Err(Error::Config(format!(
            "query has {q_len} frames, expected {}",
            params.query_len
        )));
    }
    let mut summary = match (params.use_summary, summary) {
        (true, Some(s)) => {
            let len = *f.tape.value(s).shape().last().unwrap_or(&0);
            if len != frames {
                return Err(Error::Config(format!("summary has {len} frames, expected {frames}")));
            }
            Some(s)
        }
        (true, None) => return Err(Error::Config("refinement expects a motion summary".into())),
        (false, _) => None,
    };

    let mut x = pad_query(f, query, params.future_len)?;
    let mut stages = Vec::with_capacity(params.stages.len());
    let mut summaries = Vec::new();
    for glm in &params.stages {
        let dx = basis.dct(f.tape, x)?;
        let g = match summary {
            Some(s) => {
                let ds = basis.dct(f.tape, s)?;
                f.tape.concat_last(&[ds, dx])?
            }
            None => dx,
        };
        let delta = glm_forward(f, g, glm, params.dropout)?;
        let g = f.tape.add(delta, g)?;
        if summary.is_some() {
            let (s_part, x_part) = split_channels(f, g)?;
            let s = basis.idct(f.tape, s_part)?;
            summaries.push(s);
            summary = Some(s);
            x = basis.idct(f.tape, x_part)?;
        } else {
            x = basis.idct(f.tape, g)?;
        }
        stages.push(x);
    }
    Ok(Refined {
        prediction: x,
        stages,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{BatchNormConfig, Mode, Tape};
    use crate::gradcheck;
    use crate::params::Bindings;

    struct Model {
        store: ParamStore,
        norms: NormStore,
        params: RefinementParams,
        basis: DctBasis,
    }

    #[allow(clippy::too_many_arguments)]
    fn model(p: usize, l: usize, fut: usize, n: usize, m: usize, d: usize, summary: bool, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut norms = NormStore::default();
        let params =
            RefinementParams::init(&mut store, &mut norms, p, l, fut, n, m, d, summary, 0.3, &mut rng).unwrap();
        Model {
            store,
            norms,
            params,
            basis: DctBasis::new(l + fut).unwrap(),
        }
    }

    fn randn(shape: &[usize], bound: f64, seed: u64) -> Tensor {
        Tensor::uniform(shape.to_vec(), bound, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn with_forward<T>(
        m: &mut Model,
        mode: Mode,
        body: impl FnOnce(&mut Forward<'_>, &RefinementParams, &DctBasis) -> T,
    ) -> T {
        let mut tape = Tape::new();
        let vars = m.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut f = Forward {
            tape: &mut tape,
            vars: &vars,
            norms: &mut m.norms,
            mode,
            rng: &mut rng,
            batchnorm: BatchNormConfig::default(),
        };
        body(&mut f, &m.params, &m.basis)
    }

    fn randomize_output_weights(m: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for glm in &m.params.stages {
            let shape = m.store.get(glm.output.weight).shape().to_vec();
            *m.store.get_mut(glm.output.weight) = Tensor::uniform(shape, 0.3, &mut rng);
        }
    }

    #[test]
    fn pad_repeats_last_pose() {
        let mut m = model(2, 2, 3, 1, 0, 2, true, 0);
        let out = with_forward(&mut m, Mode::Eval, |f, _, _| {
            let q = f
                .tape
                .constant(Tensor::new([2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
            let p = pad_query(f, q, 3).unwrap();
            let same = pad_query(f, q, 0).unwrap();
            assert_eq!(f.tape.value(same).data(), &[1.0, 2.0, 10.0, 20.0]);
            f.tape.value(p).clone()
        });
        assert_eq!(out.data(), &[1.0, 2.0, 2.0, 2.0, 2.0, 10.0, 20.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn split_and_concat_are_inverse() {
        let mut m = model(2, 2, 3, 1, 0, 2, true, 0);
        with_forward(&mut m, Mode::Eval, |f, _, _| {
            let a = randn(&[3, 20], 1.0, 1);
            let b = randn(&[3, 20], 1.0, 2);
            let (va, vb) = (f.tape.constant(a.clone()), f.tape.constant(b.clone()));
            let g = f.tape.concat_last(&[va, vb]).unwrap();
            let (sa, sb) = split_channels(f, g).unwrap();
            assert_eq!(f.tape.value(sa), &a);
            assert_eq!(f.tape.value(sb), &b);
            let back = f.tape.concat_last(&[sa, sb]).unwrap();
            assert_eq!(f.tape.value(back), f.tape.value(g));
            let odd = f.tape.constant(Tensor::zeros([3, 5]));
            assert!(matches!(split_channels(f, odd), Err(Error::Dimension { .. })));
        });
    }

    #[test]
    fn identity_block_is_tanh() {
        let mut store = ParamStore::new();
        let mut norms = NormStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GraphLayer::init_block(&mut store, &mut norms, "b", 3, 3, 3, &mut rng);
        *store.get_mut(layer.adjacency) = Tensor::eye(3);
        *store.get_mut(layer.weight) = Tensor::eye(3);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let input = randn(&[3, 3], 1.0, 5);
        let mut f = Forward {
            tape: &mut tape,
            vars: &vars,
            norms: &mut norms,
            mode: Mode::Eval,
            rng: &mut rng,
            batchnorm: BatchNormConfig {
                eps: 0.0,
                ..Default::default()
            },
        };
        let x = f.tape.constant(input.clone());
        let y = graph_learning_block(&mut f, x, &layer, 0.3).unwrap();
        let want = input.map(f64::tanh);
        assert!(f.tape.value(y).max_abs_diff(&want) < 1e-15);

        let z = f.tape.constant(Tensor::zeros([3, 3]));
        let y = graph_learning_block(&mut f, z, &layer, 0.3).unwrap();
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_gc_gives_zero_module_output() {
        let mut m = model(6, 10, 10, 1, 2, 16, true, 3);
        assert_eq!(m.params.stages[0].block_count(), 5);
        let out = with_forward(&mut m, Mode::Train, |f, params, _| {
            let g = f.tape.constant(randn(&[2, 6, 40], 100.0, 4));
            let y = glm_forward(f, g, &params.stages[0], 0.3).unwrap();
            f.tape.value(y).clone()
        });
        assert_eq!(out.shape(), &[2, 6, 40]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glm_rejects_channel_mismatch() {
        let mut m = model(3, 2, 2, 1, 1, 4, true, 3);
        with_forward(&mut m, Mode::Eval, |f, params, _| {
            let g = f.tape.constant(Tensor::zeros([1, 3, 7]));
            assert!(matches!(
                glm_forward(f, g, &params.stages[0], 0.0),
                Err(Error::Dimension { .. })
            ));
        });
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = model(6, 3, 2, 2, 1, 8, true, 5);
        randomize_output_weights(&mut m, 6);
        let query = randn(&[2, 6, 3], 50.0, 7);
        let summary = randn(&[2, 6, 5], 50.0, 8);
        let run = |m: &mut Model| {
            with_forward(m, Mode::Eval, |f, params, basis| {
                let q = f.tape.constant(query.clone());
                let s = f.tape.constant(summary.clone());
                let r = refine(f, q, Some(s), params, basis).unwrap();
                f.tape.value(r.prediction).clone()
            })
        };
        let a = run(&mut m);
        let b = run(&mut m);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn identity_at_init_reference_config() {
        let mut m = model(66, 10, 10, 3, 2, 64, true, 9);
        let query = randn(&[2, 66, 10], 1000.0, 10);
        let summary = randn(&[2, 66, 20], 1000.0, 11);
        let (pred, stages, padded) = with_forward(&mut m, Mode::Train, |f, params, basis| {
            let q = f.tape.constant(query.clone());
            let s = f.tape.constant(summary.clone());
            let r = refine(f, q, Some(s), params, basis).unwrap();
            let padded = pad_query(f, q, 10).unwrap();
            (
                f.tape.value(r.prediction).clone(),
                r.stages.len(),
                f.tape.value(padded).clone(),
            )
        });
        assert_eq!(stages, 3);
        assert_eq!(pred.shape(), &[2, 66, 20]);
        assert!(pred.max_abs_diff(&padded) < 1e-10);
    }

    #[test]
    fn config_mismatches() {
        let mut m = model(3, 3, 2, 1, 0, 4, true, 1);
        with_forward(&mut m, Mode::Eval, |f, params, _| {
            let q = f.tape.constant(Tensor::zeros([1, 3, 3]));
            let s = f.tape.constant(Tensor::zeros([1, 3, 5]));
            let bad_basis = DctBasis::new(6).unwrap();
            assert!(matches!(
                refine(f, q, Some(s), params, &bad_basis),
                Err(Error::Config(_))
            ));
            let basis = DctBasis::new(5).unwrap();
            let short = f.tape.constant(Tensor::zeros([1, 3, 4]));
            assert!(matches!(
                refine(f, q, Some(short), params, &basis),
                Err(Error::Config(_))
            ));
            assert!(matches!(refine(f, q, None, params, &basis), Err(Error::Config(_))));
            let bad_q = f.tape.constant(Tensor::zeros([1, 3, 2]));
            assert!(matches!(
                refine(f, bad_q, Some(s), params, &basis),
                Err(Error::Config(_))
            ));
        });
    }

    #[test]
    fn one_step_form_without_summary() {
        let mut m = model(3, 3, 2, 1, 1, 6, false, 12);
        randomize_output_weights(&mut m, 13);
        let query = randn(&[1, 3, 3], 10.0, 14);
        let (pred, manual) = with_forward(&mut m, Mode::Eval, |f, params, basis| {
            let q = f.tape.constant(query.clone());
            let r = refine(f, q, None, params, basis).unwrap();
            assert!(r.summaries.is_empty());
            let x0 = pad_query(f, q, 2).unwrap();
            let d = basis.dct(f.tape, x0).unwrap();
            let delta = glm_forward(f, d, &params.stages[0], 0.0).unwrap();
            let sum = f.tape.add(delta, d).unwrap();
            let back = basis.idct(f.tape, sum).unwrap();
            (f.tape.value(r.prediction).clone(), f.tape.value(back).clone())
        });
        assert_eq!(pred, manual);
    }

    #[test]
    fn shape_independent_of_depth() {
        for (n, mm, d) in [(1, 0, 3), (2, 1, 5), (4, 3, 2)] {
            let mut m = model(6, 4, 3, n, mm, d, true, 15);
            randomize_output_weights(&mut m, 16);
            let (shape, count) = with_forward(&mut m, Mode::Train, |f, params, basis| {
                let q = f.tape.constant(randn(&[3, 6, 4], 1.0, 17));
                let s = f.tape.constant(randn(&[3, 6, 7], 1.0, 18));
                let r = refine(f, q, Some(s), params, basis).unwrap();
                (f.tape.value(r.prediction).shape().to_vec(), r.stages.len())
            });
            assert_eq!(shape, vec![3, 6, 7]);
            assert_eq!(count, n);
        }
    }

    #[test]
    fn block_gradient_wrt_adjacency() {
        let mut store = ParamStore::new();
        let mut norms = NormStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let layer = GraphLayer::init_block(&mut store, &mut norms, "b", 4, 6, 6, &mut rng);
        let input = randn(&[2, 4, 6], 1.0, 21);
        let build = |tape: &mut Tape, vars: &[Var]| {
            let bindings = Bindings::from_vars(vars.to_vec());
            let mut norms = norms.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut f = Forward {
                tape,
                vars: &bindings,
                norms: &mut norms,
                mode: Mode::Train,
                rng: &mut rng,
                batchnorm: BatchNormConfig::default(),
            };
            let x = f.tape.constant(input.clone());
            let y = graph_learning_block(&mut f, x, &layer, 0.0)?;
            f.tape.sum(y)
        };
        let report = gradcheck::check(build, store.values(), 1e-5).unwrap();
        assert!(report.max_relative_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn refine_gradients_toy() {
        let mut m = model(6, 3, 2, 2, 1, 8, true, 22);
        randomize_output_weights(&mut m, 23);
        let query = randn(&[2, 6, 3], 1.0, 24);
        let summary = randn(&[2, 6, 5], 1.0, 25);
        let target = randn(&[2, 6, 5], 1.0, 26);
        let (params, basis, norms) = (m.params.clone(), m.basis.clone(), m.norms.clone());
        for mode in [Mode::Train, Mode::Eval] {
            let build = |tape: &mut Tape, vars: &[Var]| {
                let bindings = Bindings::from_vars(vars.to_vec());
                let mut norms = norms.clone();
                // same dropout mask on every evaluation
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut f = Forward {
                    tape,
                    vars: &bindings,
                    norms: &mut norms,
                    mode,
                    rng: &mut rng,
                    batchnorm: BatchNormConfig::default(),
                };
                let q = f.tape.constant(query.clone());
                let s = f.tape.constant(summary.clone());
                let r = refine(&mut f, q, Some(s), &params, &basis)?;
                let t = f.tape.constant(target.clone());
                let e = f.tape.sub(r.prediction, t)?;
                let e2 = f.tape.mul(e, e)?;
                f.tape.mean(e2)
            };
            let report = gradcheck::check(build, m.store.values(), 1e-5).unwrap();
            assert!(report.max_relative_error() < 1e-4, "{mode:?}: {report:?}");
        }
    }
}
