//! Generates the default synthetic world, splits it between the two agents
//! and round-trips it through the dataset JSONL format.

use std::io::BufReader;

use mhcg::dataset::{build_world, caption_round_trip_rate, category_counts, read_dataset, write_dataset, WorldSpec};

fn main() -> mhcg::Result<()> {
    let spec = WorldSpec::desk_default(7);
    let (records, split) = build_world(&spec)?;
    let counts = category_counts(&spec, &records);
    println!("{} images, {} categories, vocabulary {}", records.len(), spec.categories.len(), spec.vocab);
    for (c, n) in counts.iter().enumerate() {
        let side = match split.partition.side_of(c) {
            Some(tag) => format!("{tag:?}"),
            None => "common".into(),
        };
        println!("  {:<10} {:>5} images  {side}", spec.categories[c].name, n);
    }
    let b = &split.partition.balance;
    println!("side a: {} categories, {} images", b.categories_a, b.images_a);
    println!("side b: {} categories, {} images", b.categories_b, b.images_b);
    println!("routed: a {}, b {}, others {}", split.a.len(), split.b.len(), split.others.len());
    println!("captions naming exactly their categories: {:.3}", caption_round_trip_rate(&spec, &records));

    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &spec, &records)?;
    let (spec_back, records_back) = read_dataset(BufReader::new(bytes.as_slice()))?;
    assert_eq!((spec_back, records_back), (spec, records));
    println!("dataset JSONL: {} bytes, reads back identically", bytes.len());
    Ok(())
}
