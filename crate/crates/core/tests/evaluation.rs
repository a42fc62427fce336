use std::collections::HashMap;
use std::fs;
use std::sync::OnceLock;

use moodgen_core::corpus::{generate_synthetic_corpus, CorpusSplit, DialogueExample, SentimentLabel};
use moodgen_core::evaluation::*;
use moodgen_core::Result;

fn corpus() -> &'static CorpusSplit {
    static C: OnceLock<CorpusSplit> = OnceLock::new();
    C.get_or_init(|| generate_synthetic_corpus(0, 1000).unwrap())
}

fn training() -> ClassifierTraining {
    ClassifierTraining {
        steps: 150,
        batch_size: 16,
        lr: 3e-3,
        clip: 5.0,
        seed: 2,
    }
}

fn classifier_config() -> ClassifierConfig {
    ClassifierConfig {
        emb_dim: 16,
        enc_hidden: 16,
        mlp_hidden: 16,
        ..ClassifierConfig::new(corpus().vocab.len())
    }
}

fn classifier() -> &'static SentimentClassifier {
    static C: OnceLock<SentimentClassifier> = OnceLock::new();
    C.get_or_init(|| train_sentiment_classifier(&corpus().train, classifier_config(), &training()).unwrap().0)
}

struct Constant(Vec<usize>);

impl Responder for Constant {
    fn respond(&self, _: &[usize], _: SentimentLabel, _: u64) -> Result<Vec<usize>> {
        Ok(self.0.clone())
    }
}

/// Answers with a training response of the requested sentiment.
struct CopyGold<'a>(HashMap<SentimentLabel, Vec<&'a DialogueExample>>);

impl Responder for CopyGold<'_> {
    fn respond(&self, _: &[usize], y: SentimentLabel, seed: u64) -> Result<Vec<usize>> {
        let pool = &self.0[&y];
        Ok(pool[seed as usize % pool.len()].response.tokens().to_vec())
    }
}

fn positive_response() -> Vec<usize> {
    let c = corpus();
    c.train
        .iter()
        .find(|ex| ex.label == SentimentLabel::Positive && classifier().predict(ex.response.tokens()).unwrap() == SentimentLabel::Positive)
        .unwrap()
        .response
        .tokens()
        .to_vec()
}

#[test]
fn classifier_beats_chance_and_is_deterministic() {
    let acc = classifier().accuracy(&corpus().test).unwrap();
    assert!(acc > 0.75, "held-out accuracy {acc}");
    let (again, log) = train_sentiment_classifier(&corpus().train, classifier_config(), &training()).unwrap();
    assert_eq!(again.store.fingerprint(), classifier().store.fingerprint());
    assert_eq!(log.len(), training().steps);
}

#[test]
fn constant_responder_scores_chance() {
    let n = 10_000;
    let acc = sentiment_accuracy(&Constant(positive_response()), &corpus().test, classifier(), n, 1, LabelMode::Assigned).unwrap();
    let band = 3.0 / (n as f64).sqrt();
    assert!((acc.accuracy - 0.5).abs() <= band, "accuracy {}", acc.accuracy);
    assert_eq!(acc.positive.requested + acc.negative.requested, n);
    assert_eq!(acc.negative.correct, 0);
}

#[test]
fn copying_gold_responses_scores_near_one() {
    let mut pools: HashMap<SentimentLabel, Vec<&DialogueExample>> = HashMap::new();
    for ex in &corpus().train {
        pools.entry(ex.label).or_default().push(ex);
    }
    let acc = sentiment_accuracy(&CopyGold(pools), &corpus().test, classifier(), 2000, 3, LabelMode::Assigned).unwrap();
    assert!(acc.accuracy >= 0.98, "copy accuracy {}", acc.accuracy);
}

#[test]
fn gold_mode_keeps_corpus_labels() {
    let split = &corpus().test;
    let requests = draw_requests(split, 300, 9, LabelMode::Gold).unwrap();
    assert!(requests.iter().all(|r| r.label == split[r.example].label));
    assert_eq!(requests, draw_requests(split, 300, 9, LabelMode::Gold).unwrap());
    assert_ne!(requests, draw_requests(split, 300, 10, LabelMode::Gold).unwrap());
}

#[test]
fn classifier_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    classifier().save(dir.path()).unwrap();
    let back = SentimentClassifier::load(dir.path()).unwrap();
    for ex in corpus().test.iter().take(20) {
        assert_eq!(back.prob_positive(ex.response.tokens()).unwrap(), classifier().prob_positive(ex.response.tokens()).unwrap());
    }
}

#[test]
fn human_eval_import_checks_its_input() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let r = Constant(positive_response());
    let models: Vec<(String, &dyn Responder)> = vec![("one".into(), &r), ("two".into(), &r)];
    let export = export_human_eval(&models, &c.test, &c.vocab, 3, 0, dir.path()).unwrap();
    assert_eq!(export.rows_per_sheet, 6);
    assert!(export_human_eval(&models, &c.test[..5], &c.vocab, 3, 0, dir.path()).is_err());

    let key: Vec<KeyRow> = csv::Reader::from_path(&export.key).unwrap().deserialize().map(|r| r.unwrap()).collect();
    let a = key.iter().find(|k| k.setting == "a").unwrap();
    let b = key.iter().find(|k| k.setting == "b" && k.requested == SentimentLabel::Positive).unwrap();
    let judged = dir.path().join("judgements.csv");
    let write = |body: &str| fs::write(&judged, format!("id,judge,value\n{body}")).unwrap();

    write(&format!("{},j1,4\n{},j2,2\n{},j1,positive\n", a.id, a.id, b.id));
    let out = import_human_eval(&export.key, &judged).unwrap();
    assert_eq!(out[&a.model].quality_mean, Some(3.0));
    assert_eq!(out[&a.model].quality_items, 1);
    assert_eq!(out[&b.model].sentiment_agreement, Some(1.0));

    for bad in [
        "zz-9999,j1,3\n".to_string(),
        format!("{},j1,6\n", a.id),
        format!("{},j1,3\n{},j1,4\n", a.id, a.id),
        format!("{},j1,neutral\n", b.id),
    ] {
        write(&bad);
        assert!(import_human_eval(&export.key, &judged).is_err(), "accepted {bad:?}");
    }
}
