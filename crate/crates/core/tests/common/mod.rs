#![allow(dead_code)]

use ilitrack::classify::{self, ClassifierModel, TrainConfig};
use ilitrack::corpus::{bucket_weeks, IliWeek, Message, WeekBucket};
use ilitrack::synth::{self, SynthConfig, SynthTruth};

pub struct Corpus {
    pub messages: Vec<Message>,
    pub buckets: Vec<WeekBucket>,
    pub ili: Vec<IliWeek>,
    pub truth: SynthTruth,
}

pub fn build(config: &SynthConfig) -> Corpus {
    let (messages, truth) = synth::generate(config).expect("synthetic corpus");
    let buckets = bucket_weeks(&messages, config.first_week_end, config.weeks).expect("buckets");
    let ili = truth.ili_weeks();
    Corpus {
        messages,
        buckets,
        ili,
        truth,
    }
}

pub fn seeded(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

/// Trains the classifier on the generator's 160/46 labeled set.
pub fn trained_classifier(config: &SynthConfig) -> ClassifierModel {
    let labeled = synth::generate_labeled(config, 160, 46).expect("labeled set");
    let train = TrainConfig {
        seed: config.seed,
        ..TrainConfig::default()
    };
    classify::train(&labeled, &train).expect("classifier")
}
