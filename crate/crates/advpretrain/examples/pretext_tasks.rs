//! The three self-supervised pretext tasks — rotation, jigsaw, selfie —
//! drawn on one image: sample construction, label spaces, and the loss
//! evaluated on an untrained model.
//!
//! ```text
//! cargo run --example pretext_tasks
//! ```

use advpretrain::data::generate_synthetic_dataset;
use advpretrain::model::{init_model, Arch, TaskId};
use advpretrain::rng::Rng;
use advpretrain::ssl::{task_loss_on, TaskAux, TaskSpec};
use advpretrain::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic_dataset(7, 8, 4, 16)?;
    let x = &ds.images[0];
    let arch = Arch::by_id("desk16")?;
    let mut rng = Rng::new(99);

    // One model carrying all three task heads (plus no classifier).
    let specs: Vec<TaskSpec> = [TaskId::Rotation, TaskId::Jigsaw, TaskId::Selfie]
        .into_iter()
        .map(|t| TaskSpec::default_for(t, arch.side, 5))
        .collect::<Result<_>>()?;
    let heads: Vec<(TaskId, usize)> = specs.iter().map(|s| (s.id(), s.head_width())).collect();
    let params = init_model(&arch, &heads, None, 1234)?;

    for spec in &specs {
        let sample = spec.make_sample(x, &mut rng)?;
        let (aux, cardinality) = match &sample.aux {
            TaskAux::None => ("none".to_string(), spec.head_width()),
            TaskAux::Selfie {
                masked, target, candidates, ..
            } => (
                format!("masked {masked:?}, target {target}, {} candidates", candidates.len()),
                candidates.len(),
            ),
        };
        println!("task {:?}", spec.id());
        println!("  head width   : {}", spec.head_width());
        println!("  label        : {} (of {cardinality})", sample.label);
        println!("  input shape  : {:?}", sample.input.shape());
        println!("  aux          : {aux}");
        // Loss of the random-init model on this sample — near
        // ln(cardinality) before any training.
        let mut tape = advpretrain::autodiff::Tape::new();
        let frozen = std::collections::BTreeSet::new();
        let enc = advpretrain::model::bind_encoder(&mut tape, &params.encoder, Some(&frozen));
        let head = params.head(spec.id())?;
        let lin = advpretrain::model::bind_linear(&mut tape, &head.linear, "head", Some(&frozen));
        let xv = tape.leaf(&sample.input);
        let loss = task_loss_on(&mut tape, &enc, &lin, &sample, xv)?;
        println!(
            "  random-init loss {:.3} (ln {cardinality} = {:.3})",
            tape.scalar(loss)?,
            (cardinality as f64).ln()
        );
    }
    Ok(())
}
