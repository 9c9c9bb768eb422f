#![allow(dead_code)]

use std::path::Path;

use concept_lab::concepts::ConceptSuite;
use concept_lab::conceptor::{decompose, Decomposition, DecompositionConfig};
use concept_lab::image::ImageShape;
use concept_lab::oracle::PooledCosine;
use concept_lab::persist::save_subject;
use concept_lab::subject::vocab::VocabConfig;
use concept_lab::subject::{untrained_subject, DenoiserConfig, Subject, Vocabulary};
use concept_lab_cli::workspace::Workspace;

/// Untrained 8x8 subject with a 10-step chain; small enough for debug tests.
pub fn tiny_subject() -> Subject {
    let vcfg = VocabConfig { dim: 8, ..VocabConfig::default() };
    let vocab = Vocabulary::toy(&ConceptSuite::default_suite(), &vcfg).unwrap();
    let dcfg = DenoiserConfig {
        image: ImageShape::new(8, 8, 3),
        hidden: 16,
        blocks: 1,
        time_dim: 4,
        cond_dim: 8,
        steps: 10,
    };
    untrained_subject(vocab, dcfg, 7).unwrap()
}

pub fn tiny_config() -> DecompositionConfig {
    DecompositionConfig {
        n: 4,
        max_steps: 6,
        batch: 2,
        corpus_size: 4,
        val_every: 3,
        val_count: 2,
        hidden: 8,
        ..DecompositionConfig::default()
    }
}

pub fn tiny_decomposition(subject: &Subject, concept: &str) -> Decomposition {
    decompose(subject, concept, &tiny_config(), &PooledCosine::default(), &mut |_, _| {}).unwrap()
}

/// Workspace at `root` holding the subject and one gleeb decomposition.
pub fn workspace(root: &Path) -> (Workspace, Subject, String) {
    let ws = Workspace::new(root);
    let subject = tiny_subject();
    save_subject(&subject, ws.subject_path()).unwrap();
    let dec = tiny_decomposition(&subject, "gleeb");
    let (id, _) = ws.save_decomposition(&dec).unwrap();
    (ws, subject, id)
}
