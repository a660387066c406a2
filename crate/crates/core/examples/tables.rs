//! Runs the desk-scale experiment and prints both tables as markdown.
//!
//! `cargo run --release -p layoutmatch --example tables [-- --threads N] [--unsupervised-only]`

use std::time::Instant;

use layoutmatch::experiment::{prepare, pretrain, supervised_table, unsupervised_table, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::desk();
    let args: Vec<String> = std::env::args().collect();
    if let Some(i) = args.iter().position(|a| a == "--threads") {
        cfg.threads = args.get(i + 1).ok_or("--threads needs a value")?.parse()?;
    }
    let skip_supervised = args.iter().any(|a| a == "--unsupervised-only");
    let t = Instant::now();
    let prep = prepare(&cfg)?;
    eprintln!("vocab {} tokens, {} docs", prep.vocab.len(), prep.corpus.len());
    let pre = pretrain(&cfg, &prep)?;
    for (name, r) in &pre.reports {
        let n = r.loss_trace.len();
        let head: f64 = r.loss_trace.iter().take(20).map(|x| x.1).sum::<f64>() / 20f64.min(n as f64);
        let tail: f64 = r.loss_trace.iter().rev().take(20).map(|x| x.1).sum::<f64>() / 20f64.min(n as f64);
        eprintln!("{name}: loss {head:.3} -> {tail:.3} in {:.1}s", r.wall_clock_secs);
    }
    let t1 = unsupervised_table(&cfg, &prep, &pre)?;
    println!("{}", t1.to_markdown());
    eprintln!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    if !skip_supervised {
        let t2 = supervised_table(&cfg, &prep, &pre)?;
        println!("{}", t2.to_markdown());
        eprintln!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
