#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use freetrial::dataset::{build_promoted_set, load_ratings, split_train_test, PromotedSet, RatingFormat, RatingsTable};
use freetrial::factorization::{train_bpr, train_mf, BprModel, EmbeddingMatrix, SgdConfig};

/// `FREETRIAL_ML100K` or the copy shipped under `data/`.
pub fn ml100k_path() -> PathBuf {
    std::env::var_os("FREETRIAL_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data"))
}

pub struct Fixture {
    pub full: RatingsTable,
    pub train: RatingsTable,
    pub test: RatingsTable,
    pub thinned: RatingsTable,
    pub promoted: PromotedSet,
    pub mf: EmbeddingMatrix,
    pub bpr: BprModel,
}

pub const SPLIT_SEED: u64 = 7;

/// ML-100K split with seed 7, promoted set, and both factor models.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let path = ml100k_path();
        let full = load_ratings(&path, RatingFormat::Tab100k)
            .unwrap_or_else(|e| panic!("ML-100K not available ({e}); run scripts/fetch_ml100k.py"));
        let (train, test) = split_train_test(&full, 0.2, SPLIT_SEED).unwrap();
        let (promoted, thinned) = build_promoted_set(&train, 0.01, 0.05, 1).unwrap();
        let (mf, _) = train_mf(&train, &SgdConfig::mf_default(1)).unwrap();
        let (bpr, _) = train_bpr(&thinned, &SgdConfig::bpr_default(1)).unwrap();
        Fixture {
            full,
            train,
            test,
            thinned,
            promoted,
            mf,
            bpr,
        }
    })
}

/// Small deterministic generator for oracle code, independent of the
/// crate's RNG plumbing.
pub struct XorShift(pub u64);

impl XorShift {
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}
