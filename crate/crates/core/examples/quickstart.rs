//! Train on a planted task, then rank held-out queries with and without
//! test-time search.
//!
//! Run: `cargo run --release --example quickstart`

use lranker_core::aggregator::Aggregator;
use lranker_core::clustering::KMeansConfig;
use lranker_core::encoder::{encode_candidates_ref, RefEncoderShape, ReferenceEncoder};
use lranker_core::harness::{gen_planted_linear, resolve_dataset, PlantedLinearConfig};
use lranker_core::metrics::random_mrr_baseline;
use lranker_core::trainer::{epoch_means, EncoderInit, Model, ModelShape, TrainConfig, Trainer};
use lranker_core::tts::{evaluate_setting, initial_embeddings, EvalQuery, TtsConfig};

fn main() -> lranker_core::Result<()> {
    let dim = 32;
    let (store, records) = gen_planted_linear(&PlantedLinearConfig {
        n_candidates: 1000,
        n_queries: 250,
        dim,
        noise: 0.2,
        negatives: 100,
        seed: 1,
    })?;
    let queries = resolve_dataset(&records, &store, false)?;
    let (train, test) = queries.split_at(200);
    let examples = train
        .iter()
        .map(|q| q.to_train_example(dim))
        .collect::<lranker_core::Result<Vec<_>>>()?;
    let test: Vec<EvalQuery> = test.iter().map(|q| q.to_eval_query()).collect();

    let shape = ModelShape {
        clusters: 4,
        store_dim: dim,
        projector_hidden: 32,
        encoder: RefEncoderShape {
            base_dim: dim,
            cond_dim: dim,
            out_dim: dim,
            hidden_dim: Some(2 * dim),
            candidate_dim: None,
            init_scale: 1.0,
        },
        init: EncoderInit::Identity,
    };
    let kmeans = KMeansConfig {
        seed: 3,
        ..KMeansConfig::new(4)
    };
    let mut trainer = Trainer::new(
        Model::init(&shape, 9)?,
        &store,
        &examples,
        TrainConfig::default(),
        kmeans.clone(),
    )?;
    trainer.run(None)?;
    for (epoch, loss) in epoch_means(&trainer.log) {
        println!("epoch {epoch:>2}  loss {loss:.4}");
    }

    let model = &trainer.model;
    let agg = Aggregator {
        store: &store,
        kmeans: kmeans.clone(),
        projector: &model.projector,
    };
    let enc = ReferenceEncoder::new(&model.encoder);
    let candidates = encode_candidates_ref(&store, &model.encoder)?;
    let e0 = initial_embeddings(&test, &enc, &agg)?;

    println!(
        "random baseline MRR {:.4}",
        random_mrr_baseline(store.count())
    );
    for (width, depth) in [(0, 0), (2, 1), (3, 2)] {
        let cfg = TtsConfig {
            width,
            depth,
            kmeans: kmeans.clone(),
            ..TtsConfig::default()
        };
        let out = evaluate_setting(&test, &e0, candidates.as_ref(), &enc, &agg, &cfg)?;
        let mrr = out.iter().map(|o| o.reciprocal_rank).sum::<f64>() / out.len() as f64;
        let calls: usize = out.iter().map(|o| o.trace.encoder_calls).sum();
        println!("width {width} depth {depth}: MRR {mrr:.4}, encoder calls {calls}");
    }
    Ok(())
}
