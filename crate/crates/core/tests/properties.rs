mod common;

use std::sync::Arc;

use proptest::prelude::*;
use widesearch::agent::{rollout, Babbler, ParallelOracle, Policy, SerialOracle, Spammer, Stochastic};
use widesearch::curate::{quality_pipeline, select_rl_set, FilterSet};
use widesearch::env::{inject_distractors, EnvConfig, Environment, SearchResult};
use widesearch::eval::{cas, judge_answer, trajectory_correct, DefaultJudge};
use widesearch::reward::{
    group_rewards, grpo_surrogate, EfficiencyReference, TraceConfig,
};
use widesearch::schema::{parse_turn, render_turn, Region, ToolInvocation, TurnBlock};
use widesearch::synth::{
    build_constraint_chain, compose_mosaic, filter_predicates, random_walk_pivot, synth_mosaic_corpus, Layout, QAItem,
    SUPPORTED_LAYOUTS,
};
use widesearch::trajectory::{account, Trajectory, WhitespaceTokenizer};
use widesearch::world::{demo_world, WorldFixture};

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.?!\n\t\"\\\\{}]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn region() -> impl Strategy<Value = Region> {
    let span = (0.0..=1.0f64, 0.0..=1.0f64).prop_filter("ordered", |(a, b)| a != b).prop_map(|(a, b)| (a.min(b), a.max(b)));
    (span.clone(), span).prop_map(|((x1, x2), (y1, y2))| Region::new(x1, y1, x2, y2).unwrap())
}

fn turn() -> impl Strategy<Value = TurnBlock> {
    let image = ("[a-z0-9_]{1,8}", proptest::option::of(prop::collection::vec(region(), 1..6)))
        .prop_map(|(image_id, regions)| ToolInvocation::ImageSearch { image_id, regions });
    let search = prop::collection::vec(text(), 1..6).prop_map(|queries| ToolInvocation::TextSearch { queries });
    prop_oneof![
        (text(), image).prop_map(|(r, i)| TurnBlock::call(r, i)),
        (text(), search).prop_map(|(r, i)| TurnBlock::call(r, i)),
        (text(), "[a-zA-Z0-9 ,.]{0,30}").prop_map(|(r, a)| TurnBlock::answer(r, a)),
    ]
}

fn fragment() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("<reason>".to_string()),
        Just("</reason>".to_string()),
        Just("<tool_call>".to_string()),
        Just("</tool_call>".to_string()),
        Just("<answer>".to_string()),
        Just("</answer>".to_string()),
        Just(r#"{"name": "text_search", "arguments": {"input": ["a"]}}"#.to_string()),
        Just(r#"{"name": "image_search", "arguments": {"image_id": "img_0", "area": [[0, 0, 2, 1]]}}"#.to_string()),
        Just(r#"{"name": "image_search", "arguments": {"#.to_string()),
        "[ -~]{0,12}",
        "\\PC{0,8}",
    ]
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(t in turn()) {
        prop_assert_eq!(parse_turn(&render_turn(&t)).unwrap(), t);
    }

    #[test]
    fn parse_is_total_on_arbitrary_text(s in "\\PC{0,200}") {
        if let Ok(t) = parse_turn(&s) {
            prop_assert!(t.validate().is_ok());
        }
    }

    #[test]
    fn parse_is_total_on_spliced_fragments(parts in prop::collection::vec(fragment(), 0..8)) {
        if let Ok(t) = parse_turn(&parts.concat()) {
            prop_assert!(t.validate().is_ok());
        }
    }

    #[test]
    fn region_validation_is_exhaustive(c in prop::array::uniform4(prop_oneof![-0.5..1.5f64, Just(0.0), Just(1.0), Just(f64::NAN)])) {
        let [x1, y1, x2, y2] = c;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let valid = c.iter().all(|v| unit(*v)) && x1 < x2 && y1 < y2;
        prop_assert_eq!(Region::new(x1, y1, x2, y2).is_ok(), valid);
    }

    #[test]
    fn neighborhoods_are_symmetric_and_degrees_match_edges(s in any::<u64>()) {
        let w = common::random_world(s);
        for a in w.entities() {
            let na = w.neighbors(&a.id).unwrap();
            for b in w.entities() {
                if a.id != b.id {
                    prop_assert_eq!(na.contains(&b.id), w.neighbors(&b.id).unwrap().contains(&a.id));
                }
            }
            let brute = w.entities().iter().flat_map(|e| &e.attributes).filter(|(_, v)| *v == a.id).count();
            prop_assert_eq!(w.out_degree(&a.id).unwrap(), brute);
        }
    }

    #[test]
    fn greedy_chain_shrinks_strictly_and_terminates(s in any::<u64>()) {
        let w = common::random_world(s);
        for e in w.entities() {
            if let Ok(chain) = build_constraint_chain(&w, &e.id) {
                prop_assert!(chain.sizes.windows(2).all(|p| p[1] < p[0]));
                prop_assert_eq!(chain.sizes.len(), chain.constraints.len() + 1);
                let admissible = filter_predicates(&w, &w.neighbors(&e.id).unwrap()).len();
                prop_assert!(chain.constraints.len() <= admissible);
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic(s in any::<u64>()) {
        let w = common::random_world(s);
        for e in w.entities().iter().take(10) {
            prop_assert_eq!(random_walk_pivot(&w, &e.id, s), random_walk_pivot(&w, &e.id, s));
            prop_assert_eq!(build_constraint_chain(&w, &e.id), build_constraint_chain(&w, &e.id));
        }
        let demo = demo_world();
        let classes = vec!["Blue Jay".to_string(), "Beagle".to_string()];
        let (r, c) = SUPPORTED_LAYOUTS[(s % SUPPORTED_LAYOUTS.len() as u64) as usize];
        prop_assert_eq!(compose_mosaic(&demo, &classes, Layout::new(r, c), s), compose_mosaic(&demo, &classes, Layout::new(r, c), s));
    }

    #[test]
    fn injection_conserves_genuine_results(n in 0usize..6, k in 0usize..10, s in any::<u64>()) {
        let genuine: Vec<SearchResult> = (0..n)
            .map(|i| SearchResult { title: "t".into(), snippet: format!("fact {i}"), link: format!("l{i}"), source_entity: Some(format!("e{i}")) })
            .collect();
        let distractors: Vec<SearchResult> = (0..10)
            .map(|i| SearchResult { title: "d".into(), snippet: format!("noise {i}"), link: format!("d{i}"), source_entity: None })
            .collect();
        let obs = widesearch::env::Observation::from_results(
            vec![widesearch::env::InvocationResult { index: 0, status: widesearch::env::InvocationStatus::Ok, results: genuine.clone() }],
            0,
        );
        let out = inject_distractors(&obs, &distractors, k, s).unwrap();
        let mut kept: Vec<SearchResult> = out.results().filter(|r| r.source_entity.is_some()).cloned().collect();
        kept.sort_by(|a, b| a.link.cmp(&b.link));
        prop_assert_eq!(kept, genuine);
        prop_assert_eq!(out.results().count(), n + k);
    }

    #[test]
    fn cas_is_monotone_and_quadratic_in_accuracy(acc in 0.01..0.5f64, tok in 0.0..300.0f64, tool in 0.0..20.0f64, d in 0.01..1.0f64) {
        prop_assert!(cas(acc + d, tok, tool) > cas(acc, tok, tool));
        prop_assert!(cas(acc, tok + d, tool) < cas(acc, tok, tool));
        prop_assert!(cas(acc, tok, tool + d) < cas(acc, tok, tool));
        prop_assert_eq!(cas(2.0 * acc, tok, tool), 4.0 * cas(acc, tok, tool));
    }

    #[test]
    fn judge_is_symmetric(a in answer(), b in answer()) {
        prop_assert_eq!(judge_answer(&a, &b).correct, judge_answer(&b, &a).correct);
    }

    #[test]
    fn negative_advantages_are_floored(ratio in 0.01..20.0f64, a in -5.0..0.0f64) {
        let cfg = TraceConfig::default();
        prop_assert!(grpo_surrogate(ratio, a, &cfg) >= cfg.dual_clip_c * a);
    }
}

fn answer() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("Paris".to_string()),
        Just(" paris. ".to_string()),
        Just("1,000".to_string()),
        Just("1000".to_string()),
        Just("1000.0".to_string()),
        Just("3.5".to_string()),
        Just("3,5".to_string()),
        Just("Blue Jay, Beagle".to_string()),
        Just("blue jay beagle".to_string()),
        "[a-zA-Z0-9 ,.]{0,12}",
    ]
}

fn rollout_fixture() -> (Arc<WorldFixture>, Vec<QAItem>) {
    let world = Arc::new(demo_world());
    let corpus = synth_mosaic_corpus(&world, 24, 99);
    (world, corpus)
}

fn policy(which: usize, p: f64) -> Box<dyn Policy> {
    match which {
        0 => Box::new(ParallelOracle),
        1 => Box::new(SerialOracle),
        2 => Box::new(Spammer { copies: 1 + (p * 5.0) as usize }),
        3 => Box::new(Babbler),
        _ => Box::new(Stochastic::new(p)),
    }
}

fn shuffled(t: &Trajectory) -> Trajectory {
    let mut out = t.clone();
    for turn in &mut out.turns {
        if let Some(obs) = &mut turn.observation {
            for inv in &mut obs.per_call_results {
                inv.results.reverse();
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn rollouts_respect_budgets_and_account_exactly(
        item in 0usize..24, which in 0usize..5, p in 0.05..1.0f64,
        calls in 1usize..12, turns in 1usize..12, s in any::<u64>(), mis in prop_oneof![Just(0.0), Just(0.3)],
    ) {
        let (world, corpus) = rollout_fixture();
        let cfg = EnvConfig { max_tool_calls: calls, max_turns: turns, misidentify_prob: mis, ..EnvConfig::training() };
        let env = Environment::new(world.clone(), &cfg);
        let pol = policy(which, p);
        let t = rollout(pol.as_ref(), &env, &corpus[item], &cfg, s);
        prop_assert!(t.t_s <= calls);
        prop_assert!(t.turns.len() <= turns);
        prop_assert_eq!(t.t_s == 0, t.t_c == 0);
        let a = account(&t.turns, &WhitespaceTokenizer).unwrap();
        prop_assert_eq!((a.t_c, a.t_s, a.n_tok), (t.t_c, t.t_s, t.n_tok));
        let again = rollout(pol.as_ref(), &env, &corpus[item], &cfg, s);
        prop_assert_eq!(t.to_json_line(), again.to_json_line());

        let filters = FilterSet { image_only: true, ..FilterSet::default() };
        let v = quality_pipeline(&t, &world, &filters);
        prop_assert_eq!(&v, &quality_pipeline(&shuffled(&t), &world, &filters));
        prop_assert_eq!(&v, &quality_pipeline(&t, &world, &filters));
    }

    #[test]
    fn parallel_never_needs_more_rounds_than_serial(item in 0usize..24, s in any::<u64>()) {
        let (world, corpus) = rollout_fixture();
        let cfg = EnvConfig::evaluation();
        let env = Environment::new(world, &cfg);
        let qa = &corpus[item];
        let par = rollout(&ParallelOracle, &env, qa, &cfg, s);
        let ser = rollout(&SerialOracle, &env, qa, &cfg, s);
        let cells = qa.scene.as_ref().unwrap().cells.len();
        if cells > 1 {
            prop_assert!(par.t_c < ser.t_c);
        } else {
            prop_assert_eq!(par.t_c, ser.t_c);
        }
    }

    #[test]
    fn spammer_never_earns_positive_tool_reward(item in 0usize..24, copies in 2usize..5, s in any::<u64>()) {
        let (world, corpus) = rollout_fixture();
        let cfg = EnvConfig { max_tool_calls: 64, max_turns: 9, ..EnvConfig::training() };
        let env = Environment::new(world, &cfg);
        let qa = &corpus[item];
        let oracle = rollout(&ParallelOracle, &env, qa, &cfg, s);
        let reference = EfficiencyReference::new(oracle.t_c, oracle.t_s).unwrap();
        let mut group = vec![oracle];
        for i in 0..3u64 {
            group.push(rollout(&Spammer { copies }, &env, qa, &cfg, s ^ i));
            group.push(rollout(&Stochastic::new(0.7), &env, qa, &cfg, s ^ i));
        }
        let rewards = group_rewards(&group, qa, &reference, &DefaultJudge, &TraceConfig::default());
        for b in &rewards {
            if b.r_acc == 1.0 && b.t_c > 0 && b.t_s > reference.t_s_hat {
                prop_assert!(b.r_tool < 0.0);
            }
        }
    }
}

#[test]
fn rl_set_samples_are_sound() {
    let (world, corpus) = rollout_fixture();
    let cfg = EnvConfig::training();
    let env = Environment::new(world, &cfg);
    for p in [0.4, 0.6, 0.8] {
        let rl = select_rl_set(&corpus, &Stochastic::new(p), &DefaultJudge, &env, &cfg, 5, 3);
        for s in &rl {
            let qa = corpus.iter().find(|q| q.id == s.qa_id).unwrap();
            assert!(trajectory_correct(&DefaultJudge, qa, &s.seed_trajectory));
            assert!(s.reference.t_s_hat >= s.reference.t_c_hat && s.reference.t_c_hat >= 1);
            assert_eq!((s.reference.t_c_hat, s.reference.t_s_hat), (s.seed_trajectory.t_c, s.seed_trajectory.t_s));
        }
    }
}
