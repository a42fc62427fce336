//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p moodgen-core --test acceptance`.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use moodgen_core::corpus::{generate_synthetic_corpus, SentimentLabel};
use moodgen_core::cvae::{kl_diag_gauss, reparameterize, DiagGaussian};
use moodgen_core::discriminator::{Discriminator, DiscriminatorConfig, Triple};
use moodgen_core::evaluation::{
    corpus_perplexity, export_human_eval, sentiment_accuracy, EvalReport, GeneratorResponder, KeyRow, LabelMode, Responder, QUALITY_SHEET,
    SENTIMENT_SHEET,
};
use moodgen_core::generator::{DecodeMode, GeneratorConfig};
use moodgen_core::model::{Generator, ModelFamily, SampledPath};
use moodgen_core::nn::{finite_difference_check, Gradients, Tape};
use moodgen_core::trainer::{head_tail_means, reinforce_gradient, train_run, Phase, TrainOutcome, TrainRunConfig, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let y = SentimentLabel::Negative;
    let (h, r) = (vec![5, 7, 8, 6], vec![9, 5, 10]);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();

    // Teacher-forced NLL.
    let mut s = moodgen_core::generator::Seq2Seq::new(tiny_config(11), 1).map_err(err)?;
    randomized(&mut s.store, 0.4, 2);
    let targets = moodgen_core::generator::gold_targets(&r, s.config().eos_id);
    let mut g = Gradients::zeros_like(&s.store);
    s.nll_gradient(&h, y, &r, &mut g).map_err(err)?;
    let net = s.net;
    let e = finite_difference_check(
        |st| {
            let mut t = Tape::new(st);
            let enc = net.encode(&mut t, &h, y);
            let v = net.path_nll(&mut t, &enc, None, &targets);
            t.scalar(v)
        },
        &s.store,
        &g,
        1e-5,
    )
    .map_err(err)?;
    worst.insert("nll", e);

    // The three lower-bound parts and their sum.
    let m = tiny_cvae(11, 3, 3);
    let eps = [0.4, -1.1, 0.7];
    for part in ["reconstruction", "kl", "bow", "total"] {
        let pick = |t: &mut Tape<'_>| {
            let v = m.elbo_on_tape(t, &h, y, &r, &eps, 0.7);
            match part {
                "reconstruction" => v.reconstruction,
                "kl" => v.kl,
                "bow" => v.bow,
                _ => v.total,
            }
        };
        let mut t = Tape::new(&m.store);
        let root = pick(&mut t);
        let mut g = Gradients::zeros_like(&m.store);
        t.backward(root, 1.0, &mut g);
        let e = finite_difference_check(
            |st| {
                let mut t = Tape::new(st);
                let v = m.elbo_on_tape(&mut t, &h, y, &r, &eps, 0.7);
                let root = match part {
                    "reconstruction" => v.reconstruction,
                    "kl" => v.kl,
                    "bow" => v.bow,
                    _ => v.total,
                };
                t.scalar(root)
            },
            &m.store,
            &g,
            1e-5,
        )
        .map_err(err)?;
        ensure(!g.is_zero(), || format!("{part}: gradient is identically zero"))?;
        worst.insert(part, e);
    }

    // Discriminator BCE.
    let cfg = DiscriminatorConfig {
        emb_dim: 4,
        enc_hidden: 4,
        label_emb_dim: 3,
        sent_dim: 3,
        resp_hidden: 4,
        mlp_hidden: 4,
        ..DiscriminatorConfig::new(11)
    };
    let mut d = Discriminator::new(cfg, 4).map_err(err)?;
    randomized(&mut d.store, 0.4, 5);
    let triple = Triple {
        history: h.clone(),
        label: y,
        response: r.clone(),
    };
    for label in [0.0, 1.0] {
        let mut g = Gradients::zeros_like(&d.store);
        d.bce_gradient(&triple, label, &mut g).map_err(err)?;
        let e = finite_difference_check(
            |st| {
                let mut probe = d.clone();
                probe.store = st.clone();
                probe.bce_loss(&triple, label).unwrap()
            },
            &d.store,
            &g,
            1e-5,
        )
        .map_err(err)?;
        let key = if label > 0.5 { "bce(human)" } else { "bce(machine)" };
        worst.insert(key, e);
    }

    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(max < 1e-4, || format!("max relative error {max:.2e} >= 1e-4 ({detail})"))?;
    ensure(elapsed < 120.0, || format!("took {elapsed:.1}s (limit 120s)"))?;
    Ok(format!("{detail}; {elapsed:.1}s"))
}

fn probability_laws() -> Check {
    let y = SentimentLabel::Positive;
    let mut worst_step = 0.0f64;
    let mut worst_norm = 0.0f64;
    for seed in 0..5 {
        let m = toy_seq2seq(seed);
        for d in m.step_distributions(&[1, 2, 1], y, &[1, 1, 2]).map_err(err)? {
            worst_step = worst_step.max((d.iter().sum::<f64>() - 1.0).abs());
        }
        let g = Generator::Seq2Seq(m);
        for max_len in 1..=2 {
            let total: f64 = decode_outcomes(3, 2, max_len).iter().map(|p| path_prob(&g, &[1, 1], y, p)).sum();
            worst_norm = worst_norm.max((total - 1.0).abs());
        }
    }
    // Conditional normalization for the latent model at a fixed z.
    let mut cfg = toy_config();
    cfg.vocab_size = 3;
    let c = moodgen_core::cvae::Cvae::new(
        moodgen_core::cvae::CvaeConfig {
            generator: cfg,
            z_dim: 2,
            bow_hidden: 3,
        },
        9,
    )
    .map_err(err)?;
    let total: f64 = decode_outcomes(3, 2, 2)
        .iter()
        .map(|p| c.conditional_log_prob(&[1], y, p, &[0.3, -0.8]).unwrap().exp())
        .sum();
    worst_norm = worst_norm.max((total - 1.0).abs());
    ensure(worst_step < 1e-6, || format!("step distribution off by {worst_step:e}"))?;
    ensure(worst_norm < 1e-6, || format!("sequence probabilities sum off by {worst_norm:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(1..6);
        let mut draw = |s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
        let q = DiagGaussian { mu: draw(3.0), logvar: draw(4.0) };
        let p = DiagGaussian { mu: draw(3.0), logvar: draw(4.0) };
        min_kl = min_kl.min(kl_diag_gauss(&q, &p).map_err(err)?);
    }
    ensure(min_kl >= 0.0, || format!("negative KL {min_kl:e}"))?;

    let d = DiagGaussian {
        mu: vec![1.5, -0.5],
        logvar: vec![(0.25f64).ln(), (4.0f64).ln()],
    };
    let n = 10_000;
    let mut worst_sigma = 0.0f64;
    for k in 0..2 {
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                reparameterize(&d, &e)[k]
            })
            .collect();
        let var = d.logvar[k].exp();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let s2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard errors of the sample mean and sample variance.
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        worst_sigma = worst_sigma.max(((mean - d.mu[k]) / se_mean).abs()).max(((s2 - var) / se_var).abs());
    }
    ensure(worst_sigma < 4.0, || format!("Monte Carlo moment {worst_sigma:.2} sigma from expectation"))?;
    Ok(format!(
        "step sums {worst_step:.0e}, sequence sums {worst_norm:.0e}, min KL {min_kl:.2e} over 1000 pairs, moments within {worst_sigma:.2} sigma"
    ))
}

fn reinforce_oracle() -> Check {
    let y = SentimentLabel::Negative;
    let mut worst = 0.0f64;
    for seed in 0..4 {
        for max_len in 1..=2 {
            let m = toy_seq2seq(seed);
            let paths = decode_outcomes(3, 2, max_len);
            let analytic = expected_reward_gradient(&m, &[1, 2], y, &paths);
            let g = Generator::Seq2Seq(m);
            for baseline in [0.0, 0.37] {
                let mut expect = Gradients::zeros_like(g.store());
                for p in &paths {
                    let prob = path_prob(&g, &[1, 2], y, p);
                    let mut one = Gradients::zeros_like(g.store());
                    let sp = SampledPath { tokens: p.clone(), z: Vec::new() };
                    reinforce_gradient(&g, &[1, 2], y, &sp, path_reward(p), baseline, &mut one).map_err(err)?;
                    expect.add_scaled(&one, prob);
                }
                worst = worst.max(max_abs_diff(&expect, &analytic));
            }
        }
    }
    ensure(worst < 1e-8, || format!("estimator mean differs from the expected-reward gradient by {worst:e}"))?;

    // Bandit: BOS plays the role of token A, EOS of token B.
    let cfg = GeneratorConfig {
        vocab_size: 2,
        bos_id: 0,
        eos_id: 1,
        pad_id: None,
        ..tiny_config(2)
    };
    let mut g = Generator::new_seq2seq(cfg, 0).map_err(err)?;
    g.store_mut().rescale(0.0);
    let bias = g.store().find("gen.output.b").ok_or("no output bias")?;
    let (h, a) = ([1usize], vec![0usize]);
    let p_a = |g: &Generator| path_prob(g, &h, y, &a);
    // Closed form on the A logit: p(A)(1 - p(A)).
    let mut grads = Gradients::zeros_like(g.store());
    for (path, reward) in [(vec![0], 1.0), (vec![1], 0.0)] {
        let prob = path_prob(&g, &h, y, &path);
        let mut one = Gradients::zeros_like(g.store());
        reinforce_gradient(&g, &h, y, &SampledPath { tokens: path, z: Vec::new() }, reward, 0.0, &mut one).map_err(err)?;
        grads.add_scaled(&one, prob);
    }
    let p0 = p_a(&g);
    let closed = p0 * (1.0 - p0);
    let bandit_err = (grads.get(bias)[0] - closed).abs().max((grads.get(bias)[1] + closed).abs());
    ensure(bandit_err < 1e-9, || format!("bandit gradient off by {bandit_err:e}"))?;
    // Ascent with lr 0.1 on the exact expected gradient, against the scalar
    // recurrence d <- d + 0.2 p (1 - p) on the logit gap.
    let mut gap = 0.0f64;
    for _ in 0..100 {
        let p = p_a(&g);
        let step = 0.1 * p * (1.0 - p);
        let b = g.store_mut().get_mut(bias).values_mut();
        b[0] += step;
        b[1] -= step;
        gap += 0.2 * (1.0 / (1.0 + (-gap).exp())) * (1.0 - 1.0 / (1.0 + (-gap).exp()));
    }
    let p_final = p_a(&g);
    let p_ref = 1.0 / (1.0 + (-gap).exp());
    ensure((p_final - p_ref).abs() < 1e-9, || format!("bandit p(A) {p_final} vs recurrence {p_ref}"))?;
    ensure(p0 == 0.5 && p_final > 0.9, || format!("bandit p(A) {p0} -> {p_final}"))?;
    Ok(format!("max deviation {worst:.1e}; bandit p(A) 0.5 -> {p_final:.4}"))
}

fn perplexity_oracle() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let m = toy_seq2seq(seed);
        let split = vec![
            example(&[1, 2], &[1], SentimentLabel::Positive),
            example(&[2], &[1, 1], SentimentLabel::Negative),
        ];
        let nll: f64 = split.iter().map(|ex| enumerated_nll(&m, ex)).sum();
        let oracle = (nll / 5.0).exp();
        let ppl = corpus_perplexity(&Generator::Seq2Seq(m), &split).map_err(err)?;
        worst = worst.max((ppl.perplexity - oracle).abs());
    }
    ensure(worst < 1e-9, || format!("perplexity differs from enumeration by {worst:e}"))?;
    let corpus = generate_synthetic_corpus(0, 200).map_err(err)?;
    let v = corpus.vocab.len();
    let mut g = Generator::new_seq2seq(GeneratorConfig::new(v), 0).map_err(err)?;
    g.store_mut().rescale(0.0);
    let uniform = corpus_perplexity(&g, &corpus.test).map_err(err)?.perplexity;
    ensure((uniform - v as f64).abs() < 1e-3, || format!("uniform model PPL {uniform} for |V| = {v}"))?;
    Ok(format!("max deviation {worst:.1e}; uniform PPL {uniform:.6} for |V| = {v}"))
}

fn greedy(g: &Generator, max_len: usize) -> GeneratorResponder<'_> {
    GeneratorResponder {
        generator: g,
        max_len,
        mode: DecodeMode::Greedy,
    }
}

struct Desk {
    cfg: TrainRunConfig,
    corpus: moodgen_core::corpus::CorpusSplit,
    cgan: TrainOutcome,
    ablated: TrainOutcome,
    cvae: TrainOutcome,
    seconds: f64,
}

fn desk_runs() -> Result<Desk, String> {
    let start = Instant::now();
    let cfg = TrainRunConfig::desk(ModelFamily::Cgan);
    let corpus = cfg.load_corpus().map_err(err)?;
    let cgan = train_run(&cfg, &corpus, None).map_err(err)?;
    let ablated_cfg = TrainRunConfig {
        model_family: ModelFamily::Seq2Seq,
        sentiment_conditioning: false,
        classifier_steps: 0,
        ..cfg.clone()
    };
    let ablated = train_run(&ablated_cfg, &corpus, None).map_err(err)?;
    let cvae_cfg = TrainRunConfig {
        model_family: ModelFamily::Cvae,
        classifier_steps: 0,
        ..TrainRunConfig::desk(ModelFamily::Cvae)
    };
    let cvae = train_run(&cvae_cfg, &corpus, None).map_err(err)?;
    Ok(Desk {
        cfg,
        corpus,
        cgan,
        ablated,
        cvae,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn desk_controllability(d: &Desk) -> Check {
    let test = &d.corpus.test;
    let clf = d.cgan.classifier.as_ref().ok_or("no classifier")?;
    let pretrained = d.cgan.pretrained.as_ref().ok_or("no pretrained generator")?;
    let n = 400;
    let acc = |g: &Generator| sentiment_accuracy(&greedy(g, d.cfg.sample_max_len), test, clf, n, 17, LabelMode::Assigned).map(|a| a.accuracy);
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut record = |ok: bool, text: String| {
        if !ok {
            failures.push(text.clone());
        }
        lines.push(text);
    };

    let clf_acc = clf.accuracy(test).map_err(err)?;
    record(clf_acc >= 0.98, format!("(a) classifier held-out {clf_acc:.3}"));

    let s2s = acc(pretrained).map_err(err)?;
    let abl = acc(&d.ablated.generator).map_err(err)?;
    let differ = test
        .iter()
        .filter(|ex| {
            let r = |y| pretrained.respond(ex.history.tokens(), y, d.cfg.sample_max_len, DecodeMode::Greedy, 0).unwrap();
            r(SentimentLabel::Positive) != r(SentimentLabel::Negative)
        })
        .count() as f64
        / test.len() as f64;
    record(
        s2s >= 0.90 && (abl - 0.5).abs() <= 0.1 && differ >= 0.8,
        format!("(b) seq2seq {s2s:.3}, unconditioned {abl:.3}, label flips output on {:.0}%", differ * 100.0),
    );

    let auc = d.cgan.summary.discriminator.map(|e| e.auc).unwrap_or(0.0);
    record(auc >= 0.90, format!("(c) discriminator AUC {auc:.3}"));

    let rewards: Vec<f64> = d.cgan.metrics.iter().filter(|r| r.phase == Phase::Adversarial).filter_map(|r| r.reward_mean).collect();
    let (first, last) = head_tail_means(&rewards).ok_or("no adversarial rows")?;
    let cgan_acc = acc(&d.cgan.generator).map_err(err)?;
    record(
        last > first && cgan_acc >= s2s - 0.05,
        format!("(d) reward {first:.3} -> {last:.3}, accuracy {s2s:.3} -> {cgan_acc:.3}"),
    );

    let kls: Vec<f64> = d.cvae.metrics.iter().filter_map(|r| r.kl).collect();
    let (_, kl_last) = head_tail_means(&kls).ok_or("no KL rows")?;
    record(kl_last > 0.01, format!("(e) final-decile KL {kl_last:.3} nat"));

    record(d.seconds < 900.0, format!("{:.0}s", d.seconds));
    let text = lines.join("; ");
    if failures.is_empty() {
        Ok(text)
    } else {
        Err(text)
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Check {
    let cfg = TrainRunConfig {
        synthetic_pairs: 200,
        pretrain_g_steps: 20,
        pretrain_d_steps: 10,
        adversarial_steps: 10,
        classifier_steps: 10,
        threads: Some(1),
        ..TrainRunConfig::desk(ModelFamily::CganCvae)
    };
    let corpus = cfg.load_corpus().map_err(err)?;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    train_run(&cfg, &corpus, Some(dirs[0].path())).map_err(err)?;
    train_run(&cfg, &corpus, Some(dirs[1].path())).map_err(err)?;
    let four = TrainRunConfig { threads: Some(4), ..cfg.clone() };
    train_run(&four, &corpus, Some(dirs[2].path())).map_err(err)?;
    let a = read_tree(dirs[0].path());
    let b = read_tree(dirs[1].path());
    ensure(a == b, || "rerun produced different run-directory bytes".into())?;
    let m4 = fs::read(dirs[2].path().join(METRICS_FILE)).map_err(err)?;
    ensure(m4 == a[METRICS_FILE], || "metrics differ between 1 and 4 threads".into())?;

    let report = || -> Result<String, String> {
        let bundle = moodgen_core::trainer::RunBundle::load(dirs[0].path()).map_err(err)?;
        let clf = bundle.classifier.as_ref().ok_or("no classifier")?;
        let ppl = corpus_perplexity(&bundle.generator, &corpus.test).map_err(err)?;
        let r = GeneratorResponder {
            generator: &bundle.generator,
            max_len: 8,
            mode: DecodeMode::Sample,
        };
        let acc = sentiment_accuracy(&r, &corpus.test, clf, 40, 5, LabelMode::Assigned).map_err(err)?;
        serde_json::to_string(&EvalReport::new("cgan-cvae", "test", &ppl, &acc, cfg.fingerprint())).map_err(err)
    };
    ensure(report()? == report()?, || "evaluation report differs between runs".into())?;
    let rows = a[METRICS_FILE].iter().filter(|&&b| b == b'\n').count();
    Ok(format!("{} files identical across reruns, {rows} metric rows identical at 1 and 4 threads, eval report identical", a.len()))
}

fn human_eval(d: &Desk) -> Check {
    let pretrained = d.cgan.pretrained.as_ref().ok_or("no pretrained generator")?;
    let r1 = greedy(pretrained, d.cfg.sample_max_len);
    let r2 = GeneratorResponder {
        mode: DecodeMode::Sample,
        ..greedy(&d.cgan.generator, d.cfg.sample_max_len)
    };
    let models: Vec<(String, &dyn Responder)> = vec![("seq2seq".into(), &r1), ("cgan".into(), &r2)];
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let n = 30;
    let e = export_human_eval(&models, &d.corpus.test, &d.corpus.vocab, n, 4, x.path()).map_err(err)?;
    export_human_eval(&models, &d.corpus.test, &d.corpus.vocab, n, 4, y.path()).map_err(err)?;
    ensure(read_tree(x.path()) == read_tree(y.path()), || "re-export differs".into())?;
    let qa = fs::read_to_string(x.path().join(QUALITY_SHEET)).map_err(err)?;
    let sb = fs::read_to_string(x.path().join(SENTIMENT_SHEET)).map_err(err)?;
    ensure(qa.lines().next() == Some("id,history,response"), || "setting (a) header".into())?;
    ensure(sb.lines().next() == Some("id,response"), || "setting (b) header".into())?;
    ensure(qa.lines().count() == n * 2 + 1 && sb.lines().count() == n * 2 + 1, || "row counts".into())?;
    ensure(!qa.contains("seq2seq") && !qa.contains("cgan") && !sb.contains("seq2seq") && !sb.contains("cgan"), || {
        "model names leak into sheets".into()
    })?;
    let keys: Vec<KeyRow> = csv::Reader::from_path(&e.key).map_err(err)?.deserialize().collect::<Result<_, _>>().map_err(err)?;
    let items = |s: &str| keys.iter().filter(|k| k.setting == s).map(|k| k.example).collect::<HashSet<_>>();
    ensure(items("a").is_disjoint(&items("b")), || "item sets overlap".into())?;
    Ok(format!("{} rows per sheet, disjoint items, blinded, byte-identical re-export", n * 2))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Check)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("probability laws", probability_laws()),
        ("REINFORCE unbiasedness and bandit", reinforce_oracle()),
        ("perplexity oracle", perplexity_oracle()),
    ];
    match desk_runs() {
        Ok(desk) => {
            results.push(("desk-scale controllability run", desk_controllability(&desk)));
            results.push(("reproducibility", reproducibility()));
            results.push(("human-eval export", human_eval(&desk)));
        }
        Err(e) => {
            results.push(("desk-scale controllability run", Err(e.clone())));
            results.push(("reproducibility", reproducibility()));
            results.push(("human-eval export", Err(format!("no desk models: {e}"))));
        }
    }
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
