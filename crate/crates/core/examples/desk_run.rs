//! Trains one family at desk scale on the synthetic corpus and prints the
//! headline numbers.
//!
//! cargo run --release -p moodgen-core --example desk_run -- cgan [config.toml]

use std::time::Instant;

use moodgen_core::evaluation::{corpus_perplexity, sentiment_accuracy, GeneratorResponder, LabelMode};
use moodgen_core::generator::DecodeMode;
use moodgen_core::model::ModelFamily;
use moodgen_core::trainer::{train_run, Phase, TrainRunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family: ModelFamily = std::env::args().nth(1).unwrap_or_else(|| "cgan".into()).parse()?;
    let cfg = match std::env::args().nth(2) {
        Some(path) => TrainRunConfig::load(path.as_ref())?,
        None => TrainRunConfig::desk(family),
    };
    let corpus = cfg.load_corpus()?;
    let t0 = Instant::now();
    let out = train_run(&cfg, &corpus, None)?;
    println!("trained {family} in {:.1}s", t0.elapsed().as_secs_f64());
    let losses: Vec<f64> = out.metrics.iter().filter(|r| r.phase == Phase::PretrainG).map(|r| r.loss).collect();
    for (i, c) in losses.chunks(50).enumerate() {
        println!("  pretrain block {i}: {:.3}", c.iter().sum::<f64>() / c.len() as f64);
    }
    let kls: Vec<f64> = out.metrics.iter().filter_map(|r| r.kl).collect();
    if let Some((first, last)) = moodgen_core::trainer::head_tail_means(&kls) {
        println!("  kl first decile {first:.4}, last decile {last:.4}");
    }
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    let clf = out.classifier.as_ref().expect("classifier trained");
    let mut models = vec![("final", &out.generator)];
    if let Some(p) = &out.pretrained {
        models.push(("pretrained", p));
    }
    for (name, g) in models {
        let ppl = corpus_perplexity(g, &corpus.test)?;
        let r = GeneratorResponder {
            generator: g,
            max_len: cfg.sample_max_len,
            mode: DecodeMode::Greedy,
        };
        let acc = sentiment_accuracy(&r, &corpus.test, clf, 200, 7, LabelMode::Assigned)?;
        let rs = GeneratorResponder { mode: DecodeMode::Sample, ..r };
        let accs = sentiment_accuracy(&rs, &corpus.test, clf, 200, 7, LabelMode::Assigned)?;
        println!("{name}: ppl {:.3} (bound {}), greedy acc {:.3}, sample acc {:.3}", ppl.perplexity, ppl.is_bound, acc.accuracy, accs.accuracy);
        for ex in corpus.test.iter().take(3) {
            for y in moodgen_core::corpus::SentimentLabel::ALL {
                let resp = g.respond(ex.history.tokens(), y, cfg.sample_max_len, DecodeMode::Greedy, 1)?;
                println!("    [{y}] {} -> {}", corpus.vocab.decode(ex.history.tokens()), corpus.vocab.decode(&resp));
            }
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
