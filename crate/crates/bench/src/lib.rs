//! Fixtures shared by the kernel benchmarks.

use vla_align_core::model::{init_params, ModelConfig, MultimodalSequence};
use vla_align_core::taskgen::{make_dataset, vocab::vocab_size, Canvas, Environment, Episode, SplitSpec};
use vla_align_core::teacher::{build_cache, FeatureCache, Teacher, TeacherConfig};
use vla_align_core::trainer::{samples_from_episodes, Sample};
use vla_align_core::{ParamStore, Prng};

/// The desk-scale student.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        layers: 4,
        width: 32,
        heads: 4,
        vocab: vocab_size(),
        max_len: 32,
        ..ModelConfig::default()
    }
}

pub struct Workload {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub episodes: Vec<Episode>,
    pub samples: Vec<Sample>,
    pub cache: FeatureCache,
    pub teacher: Teacher,
}

impl Workload {
    pub fn new(episodes: usize) -> Workload {
        let model = desk_model();
        let canvas = Canvas::for_model(&model).expect("valid model");
        let episodes = make_dataset(episodes, &SplitSpec::default(), Environment::InDistribution, &Prng::new(1, 0), canvas)
            .expect("dataset");
        let samples = samples_from_episodes(&episodes, 3).expect("samples");
        let teacher = Teacher::new(TeacherConfig::default()).expect("teacher");
        let cache = build_cache(&teacher, episodes.iter().flat_map(|e| &e.frames)).expect("cache");
        let params = init_params(&model, &mut Prng::new(2, 0)).expect("params");
        Workload {
            model,
            params,
            episodes,
            samples,
            cache,
            teacher,
        }
    }

    pub fn sequence(&self) -> &MultimodalSequence {
        &self.samples[0].seq
    }
}
