//! The full predictor: motion attention followed by staged refinement.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, MotionSummary};
use crate::autodiff::{BatchNormConfig, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, Forward, NormStore, ParamStore};
use crate::refinement::{refine, RefinementParams};
use crate::tensor::Tensor;
use crate::transforms::DctBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Training history length `H`.
    pub history: usize,
    /// Query length `L`.
    pub query: usize,
    /// Frames predicted per pass `F`.
    pub future: usize,
    /// Refinement stages `N`.
    pub stages: usize,
    /// Residual block pairs per module `M` (`K = 1 + 2M` blocks).
    pub residual_pairs: usize,
    /// Latent width `d`.
    pub latent: usize,
    pub dropout: f64,
    /// Feed the motion summary into every refinement stage.
    pub use_attention: bool,
    pub attention_bias: bool,
    pub batchnorm_eps: f64,
    pub batchnorm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history: 50,
            query: 10,
            future: 10,
            stages: 3,
            residual_pairs: 2,
            latent: 256,
            dropout: 0.3,
            use_attention: true,
            attention_bias: true,
            batchnorm_eps: 1e-5,
            batchnorm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.query == 0 || self.future == 0 {
            return fail(format!(
                "query ({}) and future ({}) must be positive",
                self.query, self.future
            ));
        }
        if self.stages == 0 || self.latent == 0 {
            return fail(format!(
                "stages ({}) and latent ({}) must be positive",
                self.stages, self.latent
            ));
        }
        if self.history < self.query + self.future {
            return fail(format!(
                "history {} is shorter than query + future = {}",
                self.history,
                self.query + self.future
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.batchnorm_eps > 0.0) || !(0.0..=1.0).contains(&self.batchnorm_momentum) {
            return fail("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Blocks per graph-learning module.
    pub fn blocks(&self) -> usize {
        1 + 2 * self.residual_pairs
    }

    /// Frames in one prediction window, `L + F`.
    pub fn window(&self) -> usize {
        self.query + self.future
    }

    pub fn batchnorm(&self) -> BatchNormConfig {
        BatchNormConfig {
            eps: self.batchnorm_eps,
            momentum: self.batchnorm_momentum,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FreqMrn {
    pub config: ModelConfig,
    pub joints: usize,
    pub params: ParamStore,
    pub norms: NormStore,
    pub attention: Option<AttentionParams>,
    pub refinement: RefinementParams,
    pub basis: DctBasis,
}

/// Forward pass results on a tape.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B×P×(L+F)]`: reconstructed query followed by the future.
    pub prediction: Var,
    pub stages: Vec<Var>,
    pub summary: Option<MotionSummary>,
}

/// Eval-mode results as plain tensors.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub prediction: Tensor,
    pub stages: Vec<Tensor>,
    pub attention: Option<Tensor>,
}

impl FreqMrn {
    pub fn new(config: ModelConfig, joints: usize, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        if joints == 0 {
            return Err(Error::Config("model needs at least one joint".into()));
        }
        let channels = 3 * joints;
        let mut params = ParamStore::new();
        let mut norms = NormStore::default();
        let attention = if config.use_attention {
            Some(AttentionParams::init(
                &mut params,
                channels,
                config.latent,
                config.query,
                config.future,
                config.attention_bias,
                rng,
            )?)
        } else {
            None
        };
        let refinement = RefinementParams::init(
            &mut params,
            &mut norms,
            channels,
            config.query,
            config.future,
            config.stages,
            config.residual_pairs,
            config.latent,
            config.use_attention,
            config.dropout,
            rng,
        )?;
        Ok(FreqMrn {
            basis: DctBasis::new(config.window())?,
            config,
            joints,
            params,
            norms,
            attention,
            refinement,
        })
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Shortest history a forward pass accepts.
    pub fn min_history(&self) -> usize {
        if self.attention.is_some() {
            self.config.window()
        } else {
            self.config.query
        }
    }

    /// Runs attention and refinement on `history` (`[B×P×T]`, any
    /// `T ≥ min_history`). Train mode updates batch-norm running stats.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        vars: &Bindings,
        history: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        let mut norms = std::mem::take(&mut self.norms);
        let out = self.run(&mut norms, tape, vars, history, mode, rng);
        self.norms = norms;
        out
    }

    fn run(
        &self,
        norms: &mut NormStore,
        tape: &mut Tape,
        vars: &Bindings,
        history: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        let shape = tape.value(history).shape().to_vec();
        let [_, p, t] = shape[..] else {
            return Err(Error::dim("forward", format!("history must be [B×P×T], got {shape:?}")));
        };
        if p != self.channels() {
            return Err(Error::dim(
                "forward",
                format!("history has {p} channels, model expects {}", self.channels()),
            ));
        }
        if t < self.min_history() {
            return Err(Error::HistoryTooShort {
                got: t,
                need: self.min_history(),
            });
        }
        let mut f = Forward {
            tape,
            vars,
            norms,
            mode,
            rng,
            batchnorm: self.config.batchnorm(),
        };
        let summary = match &self.attention {
            Some(a) => Some(a.summarize(&mut f, history)?),
            None => None,
        };
        let query = f.tape.slice_last(history, t - self.config.query, self.config.query)?;
        let refined = refine(
            &mut f,
            query,
            summary.as_ref().map(|s| s.values),
            &self.refinement,
            &self.basis,
        )?;
        Ok(ModelOutput {
            prediction: refined.prediction,
            stages: refined.stages,
            summary,
        })
    }

    /// Eval-mode forward on `[B×P×T]` or `[P×T]` without touching any state.
    pub fn predict(&self, history: &Tensor) -> Result<Prediction> {
        let unbatched = history.ndim() == 2;
        let input = if unbatched {
            let mut shape = vec![1];
            shape.extend_from_slice(history.shape());
            history.reshape(shape)?
        } else {
            history.clone()
        };
        let mut norms = self.norms.clone();
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let h = tape.constant(input);
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.run(&mut norms, &mut tape, &vars, h, Mode::Eval, &mut rng)?;
        let strip = |t: &Tensor| -> Result<Tensor> {
            if unbatched {
                t.reshape(t.shape()[1..].to_vec())
            } else {
                Ok(t.clone())
            }
        };
        Ok(Prediction {
            prediction: strip(tape.value(out.prediction))?,
            stages: out
                .stages
                .iter()
                .map(|&s| strip(tape.value(s)))
                .collect::<Result<_>>()?,
            attention: out.summary.map(|s| tape.value(s.weights).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            history: 20,
            query: 5,
            future: 5,
            stages: 2,
            residual_pairs: 1,
            latent: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn defaults_match_reference_setup() {
        let c = ModelConfig::default();
        assert_eq!(
            (c.history, c.query, c.future, c.stages, c.blocks(), c.latent),
            (50, 10, 10, 3, 5, 256)
        );
        assert_eq!(c.dropout, 0.3);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let bad = [
            ModelConfig { history: 9, ..small() },
            ModelConfig { future: 0, ..small() },
            ModelConfig { stages: 0, ..small() },
            ModelConfig {
                dropout: 1.0,
                ..small()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let text = "history = 30\nbogus = 1\n";
        assert!(toml::from_str::<ModelConfig>(text).is_err());
        let parsed: ModelConfig = toml::from_str("history = 30").unwrap();
        assert_eq!(parsed.history, 30);
        assert_eq!(parsed.latent, 256);
    }

    #[test]
    fn zero_motion_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FreqMrn::new(small(), 4, &mut rng).unwrap();
        let history = Tensor::uniform(vec![2, 12, 20], 100.0, &mut rng);
        let out = model.predict(&history).unwrap();
        assert_eq!(out.prediction.shape(), &[2, 12, 10]);
        assert_eq!(out.stages.len(), 2);
        assert_eq!(out.attention.unwrap().shape(), &[2, 11]);
        for b in 0..2 {
            for p in 0..12 {
                for t in 0..10 {
                    let src = 15 + t.min(4);
                    let diff = out.prediction.get(&[b, p, t]) - history.get(&[b, p, src]);
                    assert!(diff.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn longer_history_and_unbatched_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FreqMrn::new(small(), 3, &mut rng).unwrap();
        let history = Tensor::uniform(vec![9, 37], 10.0, &mut rng);
        let out = model.predict(&history).unwrap();
        assert_eq!(out.prediction.shape(), &[9, 10]);
        assert_eq!(out.attention.unwrap().shape(), &[1, 28]);
        let short = Tensor::zeros([9, 9]);
        assert!(matches!(
            model.predict(&short),
            Err(Error::HistoryTooShort { got: 9, need: 10 })
        ));
    }

    #[test]
    fn without_attention_needs_only_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = FreqMrn::new(
            ModelConfig {
                use_attention: false,
                ..small()
            },
            2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model.min_history(), 5);
        let out = model.predict(&Tensor::ones([6, 5])).unwrap();
        assert!(out.attention.is_none());
        assert!(out.prediction.max_abs_diff(&Tensor::ones([6, 10])) < 1e-12);
    }

    #[test]
    fn parameter_count_matches_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, d, l, fut) = (12, 16, 5, 5);
        let model = FreqMrn::new(small(), 4, &mut rng).unwrap();
        let (w1, w2) = crate::attention::kernel_widths(l);
        let encoder = d * p * w1 + d + d * d * w2 + d;
        let width = 2 * (l + fut);
        let block = |cin: usize, cout: usize| p * p + cin * cout + 2 * cout;
        let glm = block(width, d) + 2 * block(d, d) + p * p + d * width;
        assert_eq!(model.parameter_count(), 2 * encoder + 2 * glm);
    }
}
