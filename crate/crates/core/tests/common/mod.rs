#![allow(dead_code)]

use rand::Rng;
use widesearch::seed;
use widesearch::world::{Entity, Listing, Predicate, WorldBuilder, WorldFixture};

fn pred(b: &mut WorldBuilder, id: &str, label: &str, family: &str, listed: Listing) {
    b.predicate_record(Predicate { id: id.into(), label: label.into(), family: family.into(), listed });
}

/// Small random knowledge graph: a few events, people attending them, and
/// attribute values drawn from whitelisted, blacklisted and bias-prone
/// families.
pub fn random_world(rng_seed: u64) -> WorldFixture {
    let mut rng = seed::rng(rng_seed);
    let mut b = WorldBuilder::new();
    pred(&mut b, "occ", "occupation", "occupation", Listing::Whitelist);
    pred(&mut b, "award", "award received", "award", Listing::Whitelist);
    pred(&mut b, "genre", "genre", "genre", Listing::Whitelist);
    pred(&mut b, "employer", "employer", "occupation", Listing::Whitelist);
    pred(&mut b, "sex", "sex or gender", "gender", Listing::Blacklist);
    pred(&mut b, "citizen", "country of citizenship", "citizenship", Listing::Whitelist);
    pred(&mut b, "instance", "instance of", "type", Listing::Whitelist);
    pred(&mut b, "attended", "participant in", "event", Listing::Neutral);
    pred(&mut b, "venue", "location", "place", Listing::Neutral);

    let mut values: Vec<(&str, Vec<String>)> = Vec::new();
    for (p, class, n) in [
        ("occ", "occupation", rng.gen_range(2..=4)),
        ("award", "award", rng.gen_range(2..=5)),
        ("genre", "genre", rng.gen_range(2..=4)),
        ("employer", "organization", rng.gen_range(1..=3)),
        ("sex", "gender", 2),
        ("citizen", "country", 3),
    ] {
        let ids: Vec<String> = (0..n).map(|i| format!("{p}_{i}")).collect();
        for id in &ids {
            b.entity(Entity::new(id.clone(), class));
        }
        values.push((p, ids));
    }
    b.entity(Entity::new("human", "concept"));
    b.abstract_value("human");
    b.bias_prone_type("country");
    b.entity(Entity::new("venue_0", "venue"));

    let events = rng.gen_range(1..=4);
    for e in 0..events {
        b.entity(Entity::new(format!("event_{e}"), "event"));
        b.edge(format!("event_{e}"), "venue", "venue_0");
    }
    let people = rng.gen_range(6..=40);
    for i in 0..people {
        let id = format!("person_{i}");
        b.entity(Entity::new(id.clone(), "person"));
        b.edge(&id, "instance", "human");
        b.edge(&id, "attended", format!("event_{}", rng.gen_range(0..events)));
        for (p, ids) in &values {
            let prob = if *p == "sex" { 1.0 } else { 0.6 };
            if rng.gen_bool(prob) {
                b.edge(&id, *p, ids[rng.gen_range(0..ids.len())].clone());
            }
            if *p == "award" && rng.gen_bool(0.2) {
                b.edge(&id, *p, ids[rng.gen_range(0..ids.len())].clone());
            }
        }
    }
    b.edge("venue_0", "venue", "event_0");
    b.build().expect("generated world is consistent")
}
