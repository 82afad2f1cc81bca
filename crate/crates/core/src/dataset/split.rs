use rand::seq::SliceRandom;

use super::{Corpus, Label, RawSignature};
use crate::error::{Error, Result};
use crate::seed;

/// Per user and class, moves `train_per_class` randomly chosen samples to the
/// training side and the rest to the test side.
pub fn split_train_test(corpus: &Corpus, train_per_class: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for user in corpus.users() {
        for label in [Label::Forged, Label::Genuine] {
            let mut group: Vec<&RawSignature> = corpus
                .signatures()
                .iter()
                .filter(|s| s.user_id == user && s.label == label)
                .collect();
            if group.len() <= train_per_class {
                return Err(Error::Dataset(format!(
                    "user {user} has {} {} samples, need more than {train_per_class}",
                    group.len(),
                    label.as_str()
                )));
            }
            group.shuffle(&mut seed::rng_for(seed, &[user as u64, label.class_index() as u64]));
            let (tr, te) = group.split_at(train_per_class);
            train.extend(tr.iter().map(|s| (*s).clone()));
            test.extend(te.iter().map(|s| (*s).clone()));
        }
    }
    Ok((
        Corpus::new(train, corpus.provenance().to_vec()),
        Corpus::new(test, corpus.provenance().to_vec()),
    ))
}

/// Splits the users (not samples) into `agents` groups whose sizes differ by
/// at most one; the first `users % agents` groups get the extra user.
pub fn partition_agents(corpus: &Corpus, agents: usize, seed: u64) -> Result<Vec<Corpus>> {
    let mut users = corpus.users();
    if agents == 0 {
        return Err(Error::Config("agent count must be at least 1".into()));
    }
    if agents > users.len() {
        return Err(Error::Dataset(format!(
            "cannot give {agents} agents distinct users from {} users",
            users.len()
        )));
    }
    users.shuffle(&mut seed::rng_for(seed, &[]));
    let base = users.len() / agents;
    let extra = users.len() % agents;
    let mut start = 0;
    Ok((0..agents)
        .map(|k| {
            let size = base + usize::from(k < extra);
            let group = &users[start..start + size];
            start += size;
            corpus.select_users(group)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Point, Provenance};
    use proptest::prelude::*;

    fn corpus(users: u32, per_class: u32) -> Corpus {
        let mut sigs = Vec::new();
        for u in 1..=users {
            for i in 1..=2 * per_class {
                sigs.push(RawSignature {
                    user_id: u,
                    sample_index: i,
                    label: if i > per_class { Label::Forged } else { Label::Genuine },
                    points: vec![Point::xy(0, 0), Point::xy(i as i64, 1)],
                });
            }
        }
        Corpus::new(sigs, vec![Provenance::Synthetic])
    }

    fn keys(c: &Corpus) -> Vec<(u32, u32)> {
        c.signatures().iter().map(|s| (s.user_id, s.sample_index)).collect()
    }

    #[test]
    fn svc_sized_user_splits_32_8() {
        let c = corpus(3, 20);
        let (train, test) = split_train_test(&c, 16, 5).unwrap();
        for counts in train.user_counts().values() {
            assert_eq!((counts.genuine, counts.forged), (16, 16));
        }
        for counts in test.user_counts().values() {
            assert_eq!((counts.genuine, counts.forged), (4, 4));
        }
        let (t2, _) = split_train_test(&c, 16, 5).unwrap();
        assert_eq!(keys(&train), keys(&t2));
        let (t3, _) = split_train_test(&c, 16, 6).unwrap();
        assert_ne!(keys(&train), keys(&t3));
    }

    #[test]
    fn split_needs_a_test_sample() {
        assert!(split_train_test(&corpus(2, 4), 4, 0).is_err());
    }

    #[test]
    fn partition_sizes() {
        let c = corpus(40, 1);
        let parts = partition_agents(&c, 5, 1).unwrap();
        assert!(parts.iter().all(|p| p.users().len() == 8));
        let sizes: Vec<usize> = partition_agents(&c, 3, 1).unwrap().iter().map(|p| p.users().len()).collect();
        assert_eq!(sizes, vec![14, 13, 13]);
        let single = partition_agents(&c, 1, 1).unwrap();
        assert_eq!(single[0], c);
        assert!(partition_agents(&c, 41, 1).is_err());
        assert!(partition_agents(&c, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(users in 1u32..6, per_class in 2u32..6, seed in any::<u64>()) {
            let c = corpus(users, per_class);
            let train_n = (per_class - 1) as usize;
            let (train, test) = split_train_test(&c, train_n, seed).unwrap();
            let mut all = keys(&train);
            all.extend(keys(&test));
            all.sort_unstable();
            prop_assert_eq!(all, keys(&c));
        }

        #[test]
        fn partition_is_deterministic_and_exhaustive(users in 1u32..30, k in 1usize..8, seed in any::<u64>()) {
            prop_assume!(k as u32 <= users);
            let c = corpus(users, 1);
            let parts = partition_agents(&c, k, seed).unwrap();
            prop_assert_eq!(&parts, &partition_agents(&c, k, seed).unwrap());
            let mut all: Vec<u32> = parts.iter().flat_map(|p| p.users()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, c.users());
            let sizes: Vec<usize> = parts.iter().map(|p| p.users().len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
