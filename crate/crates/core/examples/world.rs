//! Generate a world and look at its language prior, images and corpora.
//!
//! cargo run --example world -- 3

use iris_core::world::{biased_text_corpus, generate_world, mentioned_objects, WorldConfig};

fn main() -> iris_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let world = generate_world(seed, &WorldConfig::default())?;
    let v = world.vocab;
    println!(
        "vocab: {} objects, {} fillers, BOS={} EOS={}",
        v.n_obj,
        v.n_filler,
        v.bos(),
        v.eos()
    );
    println!("images: {} train, {} eval", world.n_train, world.images.len() - world.n_train);

    println!("engineered shortcuts (a -> b, share of row a):");
    for &(a, b) in &world.bias_pairs {
        let row = world.prior.row(a);
        let share = row[b] / row.iter().sum::<f64>();
        println!("  {a:>2} -> {b:>2}  {share:.3}");
    }

    for caption in world.sft_corpus().iter().take(4) {
        let img = &world.images[caption.image_id];
        println!("grounded  image {:>3} objects {:?}: {:?}", img.id, img.objects, caption.tokens);
    }

    let biased = biased_text_corpus(&world, 2000, seed)?;
    let with_shortcut = biased
        .iter()
        .filter(|c| {
            let objs = mentioned_objects(&v, &c.tokens);
            objs.windows(2).any(|w| world.bias_pairs.contains(&(w[0], w[1])))
        })
        .count();
    println!("biased corpus: {with_shortcut}/2000 captions chain a shortcut pair");
    println!("sample: {:?}", biased[0].tokens);
    Ok(())
}
