//! The two merge rules on hand-made inputs: averaging member logits, and
//! merging ranked temporal predictions of several models.

use egovideo::ensemble::{average_logits, merge_ranked_predictions, uniform_weights, LogitBundle};
use egovideo::{Matrix, TemporalSegment};

fn main() -> egovideo::Result<()> {
    let a = Matrix::from_vec(2, 3, vec![2.0, 0.5, -1.0, 0.0, 1.0, 3.0]);
    let b = Matrix::from_vec(2, 3, vec![1.0, 1.5, -1.0, 0.5, 0.0, 2.0]);
    let avg = average_logits(&LogitBundle::new(vec![a, b])?);
    println!("averaged logits: {:?}", avg.as_slice());

    let model_a = vec![TemporalSegment::scored(10.0, 20.0, 0.9), TemporalSegment::scored(40.0, 45.0, 0.4)];
    let model_b = vec![TemporalSegment::scored(11.0, 21.0, 0.8), TemporalSegment::scored(60.0, 70.0, 0.7)];
    let merged = merge_ranked_predictions(&[model_a.clone(), model_b.clone()], &uniform_weights(2))?;
    println!("uniform weights:");
    for s in &merged {
        println!("  [{:.2}, {:.2}] score {:.3}", s.start_s, s.end_s, s.score_or_zero());
    }
    let merged = merge_ranked_predictions(&[model_a, model_b], &[0.2, 0.8])?;
    println!("weights 0.2 / 0.8:");
    for s in &merged {
        println!("  [{:.2}, {:.2}] score {:.3}", s.start_s, s.end_s, s.score_or_zero());
    }
    Ok(())
}
