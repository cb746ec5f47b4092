//! Full loop: train, build a descriptor index from the reference traversal,
//! then localize scans from a traversal the model never saw.

use soenet::datagen::generate_world;
use soenet::experiment::{split, ExperimentConfig};
use soenet::model::SoeNet;
use soenet::retrieval::{build_index, embed_queries, query_topk, recall_at_1pct, recall_at_n};
use soenet::training::train;

fn main() -> soenet::Result<()> {
    let config = ExperimentConfig::default();
    let world = generate_world(&config.world)?;
    let (train_set, reference, queries) = split(&world.submaps, &config)?;

    let outcome = train::<f32>(&train_set, &config.model, &config.train, &config.loss, &config.rule, None, |_| {})?;
    let net = SoeNet::new(config.model.clone(), outcome.params)?;

    let db = build_index(&reference, &net)?;
    println!("index: {} submaps, {}-d descriptors", db.len(), db.dim());

    let probe = &queries[5];
    for hit in query_topk(&db, &probe.cloud, &net, 3)? {
        let meters = db.entries()[hit.index].location.distance(&probe.location);
        println!("{} -> {} (descriptor distance {:.4}, {meters:.1} m away)", probe.id, hit.id, hit.distance);
    }

    let q = embed_queries(&queries, &net)?;
    let radius = config.rule.eval_radius;
    for n in [1, 5] {
        println!("recall@{n}: {:.3}", recall_at_n(&db, &q, n, radius)?);
    }
    println!("recall@1%: {:.3}", recall_at_1pct(&db, &q, radius)?);
    Ok(())
}
