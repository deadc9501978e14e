// scratch: does knowledge injection lift held-out probing at medium scale?
use std::time::Instant;
use trelm_core::corpus_kg::{generate_corpus, generate_kg, split_triples, train_kg_embeddings, Vocab};
use trelm_core::harness::{pretrain, Mode, RunConfig, RunData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sentences: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let kg = generate_kg(7, 100, 8, 400).unwrap();
    let (train_kg, heldout) = split_triples(&kg, 7, 0.1).unwrap();
    let vocab = Vocab::build(&kg, Vocab::distractors_for_total(&kg, 2000).unwrap());
    let corpus = generate_corpus(&train_kg, &vocab, 7, sentences, 1.1).unwrap();
    let kg_embeddings = train_kg_embeddings(&kg, 32, 120, 1.0, 0.05, 7).unwrap().embeddings;
    println!("heldout {} triples, corpus {} sentences", heldout.len(), corpus.len());
    let data = RunData { kg, corpus, kg_embeddings, heldout };

    for mode in [Mode::Trelm, Mode::MlmBaseline] {
        let cfg = RunConfig { seed, mode, epochs, recompute_every: 8, ..RunConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let out = pretrain(&cfg, &data, dir.path(), None).unwrap();
        let n = out.metrics.len();
        print!("{mode}: {:.1}s loss {:.3}->{:.3} |", t.elapsed().as_secs_f64(), out.metrics[0].l_total, out.metrics[n-1].l_total);
        for p in &out.probes {
            print!(" ep{}: held {:.3} train {:.3} |", p.epoch, p.heldout.as_ref().unwrap().macro_p_at_1, p.train.macro_p_at_1);
        }
        println!();
    }
}
