mod common;

use coen::enhance::{cem_forward, CemConfig, EnhancementParams};
use coen::params::{ParamStore, Session};
use coen::proxy::ProxyFeature;
use coen::quality::{quality_scores, QualityRanking};
use coen::vit::EmbTokens;
use coen::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_ordering_round_trips() {
    common::sort_round_trip().unwrap();
}

proptest! {
    #[test]
    fn quality_scores_bounded_and_scale_invariant(seed in any::<u64>()) {
        let r = common::cosine_range_and_scale(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn zero_weight_enhancement_is_identity(seed in any::<u64>()) {
        let r = common::cem_zero_weight_identity(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>()) {
        let r = common::softmax_rows_normalised(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn spectrum_equal_to_proxy_ranks_first(seed in any::<u64>(), pick in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::uniform(&[4, 5], &mut rng);
        let mut xs: [Tensor; 3] = std::array::from_fn(|_| common::uniform(&[4, 5], &mut rng));
        xs[pick] = p.clone();
        let q = quality_scores(&p, &xs[0], &xs[1], &xs[2]).unwrap();
        prop_assert_eq!(q.primary().index(), pick);
        prop_assert!((q.scores[pick] - 1.0).abs() < 1e-12);
    }

    /// Disabled paths in eval mode leave the tokens untouched whatever the
    /// weights and ranking.
    #[test]
    fn disabled_enhancement_is_identity(seed in any::<u64>(), order in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = EnhancementParams::new(&mut store, 4, false, &mut rng);
        let cfg = CemConfig { primary_enabled: false, proxy_enabled: false, ..Default::default() };
        let inputs: [Tensor; 3] = std::array::from_fn(|_| common::uniform(&[3, 4], &mut rng));
        let mut s = Session::eval(&store);
        let toks = inputs.clone().map(|t| EmbTokens(s.graph.constant(t).unwrap()));
        let p = ProxyFeature(s.graph.constant(common::uniform(&[3, 4], &mut rng)).unwrap());
        let ranking = QualityRanking::with_order([0.0; 3], coen::quality::all_orders()[order]);
        let out = cem_forward(&mut s, toks, p, &ranking, &params, &cfg).unwrap();
        for (o, x) in out.iter().zip(&inputs) {
            prop_assert_eq!(s.graph.value(o.0), x);
        }
    }
}
