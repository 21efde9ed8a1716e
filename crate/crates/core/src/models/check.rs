//! Finite-difference checks of the full model losses on small configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::{gradcheck, GradcheckReport};
use crate::autodiff::{Axis, Tensor};
use crate::encoding::{EncodingMode, TokenId, Vocabulary};

use super::{Classifier, ClassifierConfig, Generator, GeneratorConfig, ModelError, Params};

pub fn small_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_len: 16,
        ff_mult: 2,
        ..GeneratorConfig::default()
    }
}

pub fn small_classifier_config() -> ClassifierConfig {
    ClassifierConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_len: 16,
        ff_mult: 2,
        encoding: EncodingMode::Array,
        ..ClassifierConfig::default()
    }
}

/// Adds `N(0, std²)` noise to every parameter so no gradient is trivially zero.
fn perturb(params: &mut Params, std: f64, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut() {
        let noise = Tensor::<f64>::randn(t.rows(), t.cols(), std, rng);
        t.axpy(1.0, &noise);
    }
}

fn sample_ids(words: &str) -> Vec<TokenId> {
    Vocabulary::get().ids(words).expect("known tokens")
}

/// Teacher-forced NLL of a small generator against finite differences, over
/// every parameter.
pub fn lm_loss_gradcheck(seed: u64, eps: f64) -> Result<GradcheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Generator::new(small_generator_config(), &mut rng)?;
    perturb(model.params_mut(), 0.3, &mut rng);
    let v = Vocabulary::get();
    let mut seq = vec![v.bos()];
    seq.extend(sample_ids("C0 ,"));
    seq.push(v.sep());
    seq.extend(sample_ids("C0 IN OUT"));
    seq.push(v.eos());
    let prompt_len = 4;
    let inputs = model.params().tensors().to_vec();
    Ok(gradcheck(&inputs, eps, |g, w| {
        model.lm_nll(g, w, &seq, prompt_len).map_err(|e| match e {
            ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        })
    })?)
}

/// Binary cross-entropy of a small classifier against finite differences,
/// over every parameter and the soft input logits (fed through a row softmax).
pub fn clf_loss_gradcheck(seed: u64, eps: f64) -> Result<GradcheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Classifier::new(small_classifier_config(), &mut rng)?;
    perturb(model.params_mut(), 0.3, &mut rng);
    let n_params = model.params().len();
    let vocab = model.config().vocab_size;
    let ids: Vec<usize> = sample_ids("C0 n1 OUT ; L0 n1 0")
        .into_iter()
        .map(usize::from)
        .collect();
    let mut noisy = Tensor::from_fn(ids.len(), vocab, |r, c| if ids[r] == c { 4.0 } else { 0.0 });
    noisy.axpy(1.0, &Tensor::randn(ids.len(), vocab, 0.5, &mut rng));
    let mut inputs = model.params().tensors().to_vec();
    inputs.push(noisy);
    Ok(gradcheck(&inputs, eps, |g, w| {
        let dist = g.softmax(w[n_params], Axis::Cols);
        let p = model
            .forward_dist(g, &w[..n_params], dist)
            .map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
        g.binary_cross_entropy(p, &[1.0])
    })?)
}
