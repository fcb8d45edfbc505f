//! Category precision/recall/F1 and BLEU@4 on hand-made captions.

use mhcg::metrics::{bleu4, category_metrics, match_categories, CategoryCounts, CategoryMetrics, Lexicon};
use mhcg::{Caption, ModelDims};

fn main() -> mhcg::Result<()> {
    let dims = ModelDims::new(8, 2, 3, 2)?;
    let lexicon = Lexicon(vec![vec![0], vec![1, 2], vec![3]]);
    // (caption, annotated categories)
    let images = [
        (vec![0, 1, 7], vec![0, 1]),
        (vec![0, 7, 7], vec![0, 2]),
        (vec![3, 2, 7], vec![1]),
        (vec![7, 7, 7], vec![2]),
    ];
    let k = lexicon.categories();
    let (mut correct, mut predicted, mut truth) = (vec![0; k], vec![0; k], vec![0; k]);
    for (tokens, annotated) in &images {
        let mentioned = match_categories(&Caption::new(tokens.clone(), &dims)?, &lexicon);
        for &c in &mentioned {
            predicted[c] += 1;
            if annotated.contains(&c) {
                correct[c] += 1;
            }
        }
        for &c in annotated {
            truth[c] += 1;
        }
    }
    let m = category_metrics(&CategoryCounts::new(correct, predicted, truth)?)?;
    for (name, v) in CategoryMetrics::NAMES.iter().zip(m.values()) {
        println!("{name:>4} {v:.4}");
    }

    let caption = |t: &[usize]| Caption::new(t.to_vec(), &ModelDims::new(8, 2, t.len(), 2).unwrap()).unwrap();
    let refs = [caption(&[1, 2, 3, 4, 5, 6]), caption(&[1, 2, 3, 5, 4, 6])];
    for cand in [[1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 6, 5], [6, 5, 4, 3, 2, 1]] {
        println!("BLEU@4 {cand:?} = {:.4}", bleu4(&caption(&cand), &refs)?);
    }
    Ok(())
}
