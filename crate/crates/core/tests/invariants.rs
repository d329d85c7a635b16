mod support;

use proptest::prelude::*;

use lambert_core::gridworld::{env_reset, EnvConfig, EnvKind};
use lambert_core::tokenizer::{tokenize, Vocabulary, DEFAULT_MAX_LEN};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resets_are_solvable_and_pay_the_decay_formula(seed in any::<u64>(), env in 0usize..3, size in 5usize..7) {
        let cfg = EnvConfig::new(EnvKind::ALL[env]).with_grid_size(size);
        let (state, _) = env_reset(&cfg, seed);
        prop_assert_eq!(state.max_steps, 4 * size * size);
        let path = support::shortest_solution(&state).expect("solvable reset");
        let outcome = support::replay(&state, &path);
        let (reward, done) = *outcome.last().unwrap();
        prop_assert!(done);
        prop_assert_eq!(reward, support::decayed_reward(0.9, path.len() - 1, state.max_steps));
    }

    #[test]
    fn reset_is_a_function_of_the_seed(seed in any::<u64>(), env in 0usize..3) {
        let cfg = EnvConfig::new(EnvKind::ALL[env]);
        let (a, oa) = env_reset(&cfg, seed);
        let (b, ob) = env_reset(&cfg, seed);
        prop_assert_eq!(a.cells, b.cells);
        prop_assert_eq!(a.agent_pos, b.agent_pos);
        let vocab = Vocabulary::full();
        let ta = tokenize(&oa, &vocab, DEFAULT_MAX_LEN).unwrap();
        let tb = tokenize(&ob, &vocab, DEFAULT_MAX_LEN).unwrap();
        prop_assert_eq!(ta.token_ids, tb.token_ids);
    }
}
