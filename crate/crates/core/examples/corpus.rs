// Generates the bilingual counterfactual corpus, shows one matched pair and
// the subject/relation/target overlap histograms between the two languages.
//
//   cargo run --release --example corpus

use memat::dataset::{corpus_tokenizer, generate_corpus, matched_pairs, similarity_histogram, Stratum};
use memat::experiment::ExperimentConfig;

fn main() -> memat::Result<()> {
    let cfg = ExperimentConfig::default().resolved();
    let records = generate_corpus(&cfg.corpus)?;
    let tok = corpus_tokenizer(&records);
    println!("{} records, vocabulary of {} words", records.len(), tok.len());

    let (a, b) = matched_pairs(&records)[0];
    for r in [a, b] {
        println!("\n[{}] {} | {} -> {} (counterfactual: {})", r.language, r.subject, r.efficacy_prompt, r.target_true, r.target_new);
        println!("  paraphrase:   {}", r.paraphrase_prompts[0]);
        println!("  neighborhood: {}", r.neighborhood_prompts[0].prompt);
    }

    let sim = similarity_histogram(&records, &tok)?;
    println!("\nJaccard histograms over {} pairs:\n{}", sim.n_pairs, sim.to_csv());
    let identical = sim.subject_jaccard.values().filter(|&&j| Stratum::of(j) == Stratum::Identical).count();
    let low = sim.subject_jaccard.values().filter(|&&j| Stratum::of(j) == Stratum::Low).count();
    println!("subject strata: {identical} identical, {low} low overlap");
    Ok(())
}
