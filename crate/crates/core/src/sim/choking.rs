//! Unchoke-set selection rules.

use rand::seq::SliceRandom;
use rand::Rng;

use super::NodeId;

/// `k` coalition members drawn uniformly without replacement, or every
/// other member when there are at most `k`. Returned in id order.
pub fn rechoke_random<R: Rng + ?Sized>(
    peer: NodeId,
    members: &[NodeId],
    k: usize,
    rng: &mut R,
) -> Vec<NodeId> {
    let others: Vec<NodeId> = members.iter().copied().filter(|&m| m != peer).collect();
    let mut picked = if others.len() <= k {
        others
    } else {
        others.choose_multiple(rng, k).copied().collect()
    };
    picked.sort_unstable();
    picked
}

/// Regular Tit-for-Tat slots: the `slots` interested candidates that sent
/// the most during the last interval, ties by ascending id.
pub fn rechoke_tit_for_tat(candidates: &[(NodeId, f64)], slots: usize) -> Vec<NodeId> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<NodeId> = ranked.into_iter().take(slots).map(|(id, _)| id).collect();
    picked.sort_unstable();
    picked
}

/// Uniform draw for the optimistic slot.
pub fn draw_optimistic<R: Rng + ?Sized>(candidates: &[NodeId], rng: &mut R) -> Option<NodeId> {
    candidates.choose(rng).copied()
}

/// `slots` interested peers chosen uniformly at random.
pub fn seed_rechoke<R: Rng + ?Sized>(interested: &[NodeId], slots: usize, rng: &mut R) -> Vec<NodeId> {
    rechoke_random(NodeId::MAX, interested, slots, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_square_p(counts: &[u64]) -> f64 {
        let n: u64 = counts.iter().sum();
        let e = n as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn lone_member_unchokes_nobody() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(rechoke_random(3, &[3], 4, &mut rng).is_empty());
    }

    #[test]
    fn small_coalition_unchokes_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rechoke_random(2, &[1, 2, 3, 4, 5], 4, &mut rng), vec![1, 3, 4, 5]);
        assert_eq!(rechoke_random(2, &[1, 2, 3], 4, &mut rng), vec![1, 3]);
    }

    #[test]
    fn random_choking_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let members: Vec<NodeId> = (0..20).collect();
        let mut counts = [0u64; 20];
        for _ in 0..100_000 {
            let s = rechoke_random(0, &members, 5, &mut rng);
            assert_eq!(s.len(), 5);
            assert!(!s.contains(&0));
            for id in s {
                counts[id as usize] += 1;
            }
        }
        assert!(chi_square_p(&counts[1..]) > 0.01);
    }

    #[test]
    fn seed_choice_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let interested: Vec<NodeId> = (1..=20).collect();
        let mut counts = [0u64; 20];
        for _ in 0..100_000 {
            for id in seed_rechoke(&interested, 4, &mut rng) {
                counts[id as usize - 1] += 1;
            }
        }
        assert!(chi_square_p(&counts) > 0.01);
    }

    #[test]
    fn seed_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(seed_rechoke(&[], 4, &mut rng).is_empty());
        assert_eq!(seed_rechoke(&[7, 3], 4, &mut rng), vec![3, 7]);
    }

    #[test]
    fn tit_for_tat_without_history_goes_by_id() {
        let c = [(9, 0.0), (4, 0.0), (6, 0.0), (2, 0.0), (7, 0.0)];
        assert_eq!(rechoke_tit_for_tat(&c, 4), vec![2, 4, 6, 7]);
    }

    #[test]
    fn tit_for_tat_keeps_dominant_uploader() {
        let c = [(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0), (9, 5.0)];
        let s = rechoke_tit_for_tat(&c, 4);
        assert!(s.contains(&9));
        assert_eq!(s, vec![1, 2, 3, 9]);
        let c = [(1, 1.0), (2, 3.0), (3, 2.0)];
        assert_eq!(rechoke_tit_for_tat(&c, 2), vec![2, 3]);
    }
}
