//! Shared fixtures for the benchmarks.

use odp_core::gradcheck::random_lattice;
use odp_core::model::select_trainable;
use odp_core::trainer::{synth_generate, SpeakerShift, SyntheticTaskSpec, Utterance};
use odp_core::{GroupName, ModelConfig, RnntModel, SplitPlan, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random log-probability lattices with their label sequences.
pub fn lattices(n: usize, max_t: usize, max_u: usize, max_v: usize, seed: u64) -> Vec<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_lattice(&mut rng, max_t, max_u, max_v)).collect()
}

/// A freshly initialized model, a batch of utterances and a split plan that
/// trains every parameter.
pub struct SplitFixture {
    pub model: RnntModel,
    pub batch: Vec<Utterance>,
    pub plan: SplitPlan,
}

impl SplitFixture {
    pub fn new(cfg: ModelConfig, boundary: usize, batch: usize) -> Self {
        let model = RnntModel::init(cfg.clone(), 0).expect("valid preset");
        let spec = SyntheticTaskSpec::for_model(&cfg, 1, SpeakerShift::IDENTITY);
        let batch = synth_generate(&spec, batch).expect("valid task");
        let trainable = select_trainable(&model, GroupName::All).expect("known group");
        let plan = SplitPlan::new(&model, boundary, &trainable.ids).expect("boundary in range");
        Self { model, batch, plan }
    }
}
